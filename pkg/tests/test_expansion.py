import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtme.errors import ContractError, ValidationError
from dtme.expansion import (ExpansionPlan, apply_plan, build_plan, closed_form_overhead, layer_budget,
                            make_null_instance, make_range_instance, modulators, param_overhead,
                            task_tokens, verify_proposition1, verify_proposition2)
from dtme.model import HeadSpec, ModelConfig, MultiTaskTransformer

RANGE = (0.9, 0.1, 0.5, 0.2)
NULL = (0.1, 0.8, 0.2, 0.7)
SCORES = list(zip(RANGE, NULL))


def model(depth=4, hidden=16, K=2, tokens=4, seed=0):
    specs = tuple(HeadSpec("regression-vector", 2) for _ in range(K))
    return MultiTaskTransformer(ModelConfig(depth, hidden, 2, tokens, 3, specs), np.random.default_rng(seed))


class TestBuildPlan:
    def test_standard_example(self):
        p = build_plan(SCORES, beta=0.5)
        assert p.tm_layers == [1, 3] and p.te_layers == [2, 4]

    def test_swap_example(self):
        p = build_plan(SCORES, beta=0.5, strategy="swap")
        assert p.tm_layers == [2, 4] and p.te_layers == [1, 3]

    def test_reverse(self):
        p = build_plan(SCORES, beta=0.5, strategy="reverse")
        assert p.tm_layers == [2, 4] and p.te_layers == [1, 3]

    def test_ties_go_to_lowest_layers(self):
        p = build_plan([(0.0, 0.0)] * 6, beta=0.5)
        assert p.tm_layers == [1, 2, 3] and p.te_layers == [1, 2, 3]
        assert p.actions[1] == "TM+TE"

    def test_random_is_seeded(self):
        a = build_plan(SCORES * 2, beta=0.5, strategy="random", seed=7)
        b = build_plan(SCORES * 2, beta=0.5, strategy="random", seed=7)
        assert a.actions == b.actions and len(a.tm_layers) == len(a.te_layers) == 4
        others = {tuple(build_plan(SCORES * 2, strategy="random", seed=s).tm_layers) for s in range(10)}
        assert len(others) > 1

    def test_mechanism_filter(self):
        assert build_plan(SCORES, mechanisms=("TM",)).te_layers == []
        assert build_plan(SCORES, mechanisms=("TE",)).tm_layers == []
        assert build_plan(SCORES, mechanisms=()).is_empty
        with pytest.raises(ValidationError):
            build_plan(SCORES, mechanisms=("XX",))

    @pytest.mark.parametrize("beta", [0.0, -0.5, 1.5])
    def test_beta_range(self, beta):
        with pytest.raises(ValidationError):
            build_plan(SCORES, beta=beta)

    def test_budget_rounding(self):
        assert layer_budget(0.3, 10) == 3
        assert layer_budget(0.25, 6) == 2
        assert layer_budget(1.0, 6) == 6
        assert layer_budget(0.01, 6) == 1

    def test_mapping_input_and_gaps(self):
        assert build_plan({1: (1, 0), 2: (0, 1)}, beta=0.5).actions == {1: "TM", 2: "TE"}
        with pytest.raises(ValidationError):
            build_plan({1: (1, 0), 3: (0, 1)})
        with pytest.raises(ValidationError):
            build_plan(SCORES, strategy="best")


@settings(max_examples=60, deadline=None)
@given(scores=st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12),
       beta=st.sampled_from([0.25, 0.5, 0.75, 1.0]),
       strategy=st.sampled_from(["standard", "reverse", "swap", "random"]), seed=st.integers(0, 100))
def test_plan_properties(scores, beta, strategy, seed):
    p = build_plan(scores, beta=beta, strategy=strategy, seed=seed)
    k = layer_budget(beta, len(scores))
    assert len(p.tm_layers) == k and len(p.te_layers) == k
    assert p.actions == build_plan(scores, beta=beta, strategy=strategy, seed=seed).actions
    if strategy == "standard":
        chosen = [scores[d - 1][0] for d in p.tm_layers]
        rest = [scores[d - 1][0] for d in range(1, len(scores) + 1) if d not in p.tm_layers]
        assert not rest or min(chosen) >= max(rest)
    assert ExpansionPlan.from_text(p.to_text()).actions == p.actions


class TestPlanText:
    def test_round_trip(self):
        p = build_plan(SCORES, beta=0.5, tokens_per_task=3, step=12, seed=4)
        back = ExpansionPlan.from_text(p.to_text())
        assert back == p

    def test_comments_ignored(self):
        text = "# a plan\n" + build_plan(SCORES).to_text() + "# trailing\n"
        assert ExpansionPlan.from_text(text).tm_layers == [1, 3]

    @pytest.mark.parametrize("mutate", [
        lambda t: t.replace("version = 1", "version = 9"),
        lambda t: t.replace("layer 2 TE", "layer 2 XX"),
        lambda t: t.replace("strategy = standard\n", ""),
        lambda t: t.replace("layer 3 TM", "layer three TM"),
        lambda t: t.replace("layer 4 TE", "layer 5 TE"),
    ])
    def test_rejects_malformed(self, mutate):
        with pytest.raises(ValidationError):
            ExpansionPlan.from_text(mutate(build_plan(SCORES).to_text()))

    def test_budget_enforced(self):
        with pytest.raises(ValidationError):
            ExpansionPlan({1: "TM", 2: "TM", 3: "none", 4: "none"}, beta=0.25)


class TestApplyPlan:
    def test_empty_plan_changes_nothing(self):
        m = model()
        before = m.state_dict()
        apply_plan(m, ExpansionPlan.empty(4))
        assert list(m.state_dict()) == list(before) and not m.is_expanded

    def test_views(self):
        m = apply_plan(model(K=3), build_plan(SCORES, tokens_per_task=2))
        assert [(v.task, v.layer) for v in modulators(m)] == [(1, 1), (2, 1), (3, 1), (1, 3), (2, 3), (3, 3)]
        assert all(np.all(v.weight == 1) and np.all(v.bias == 0) for v in modulators(m))
        assert all(v.tokens.shape == (2, 16) and not v.tokens.any() for v in task_tokens(m))

    def test_one_tm_layer_adds_64(self):
        m = model(hidden=16, K=2)
        base = m.num_parameters()
        apply_plan(m, ExpansionPlan({1: "TM", 2: "none", 3: "none", 4: "none"}))
        assert m.num_parameters() - base == 64

    def test_double_expansion(self):
        m = apply_plan(model(), build_plan(SCORES))
        with pytest.raises(ContractError):
            apply_plan(m, build_plan(SCORES))

    def test_depth_mismatch(self):
        with pytest.raises(ContractError):
            apply_plan(model(depth=3), build_plan(SCORES))


class TestOverhead:
    def test_equal(self):
        assert param_overhead(1000, 1000) == 0.0

    def test_table_scale(self):
        assert param_overhead(1000, 1002.4) == pytest.approx(0.24)

    def test_non_positive(self):
        with pytest.raises(ValidationError):
            param_overhead(0, 10)

    @pytest.mark.parametrize("beta", [0.25, 0.5, 1.0])
    @pytest.mark.parametrize("t", [1, 3, 6])
    @pytest.mark.parametrize("K,p,D", [(2, 8, 4), (3, 16, 6)])
    def test_formula_grid(self, beta, t, K, p, D):
        m = model(depth=D, hidden=p, K=K)
        base = m.num_parameters()
        scores = [(np.sin(d), np.cos(d)) for d in range(D)]
        plan = build_plan(scores, beta=beta, tokens_per_task=t)
        apply_plan(m, plan)
        added = len(plan.tm_layers) * K * 2 * p + len(plan.te_layers) * K * t * p
        assert m.num_parameters() - base == added
        assert param_overhead(base, m) == closed_form_overhead(plan, K, p, base) == 100.0 * added / base


def insertion_shift(strategy, te, beta=0.5):
    rng = np.random.default_rng(11)
    specs = tuple(HeadSpec("regression-vector", 2) for _ in range(3))
    m = MultiTaskTransformer(ModelConfig(4, 16, 2, 5, 3, specs, te_attention=te), rng)
    x = rng.standard_normal((3, 5, 3))
    before = m.predict(x)
    apply_plan(m, build_plan(rng.random((4, 2)).tolist(), beta=beta, strategy=strategy, seed=1,
                             tokens_per_task=4))
    return max(float(np.abs(a - b).max()) for a, b in zip(before, m.predict(x)))


@pytest.mark.parametrize("strategy", ["standard", "random", "reverse", "swap"])
@pytest.mark.parametrize("beta", [0.25, 0.5, 1.0])
def test_insertion_is_output_neutral(strategy, beta):
    assert insertion_shift(strategy, "additive", beta) == 0.0


def test_joint_softmax_insertion_is_not_neutral():
    # zero-valued task keys still take softmax mass from the shared keys
    assert insertion_shift("standard", "joint") > 1e-6


class TestPropositions:
    @pytest.mark.parametrize("seed", range(10))
    def test_modulator_step(self, seed):
        report = verify_proposition1(*make_range_instance(seed))
        assert report.null_gradient_norm <= 1e-8
        assert report.loss_after < report.loss_before
        assert 3.5 <= report.residual_ratio <= 4.5
        assert report.range_conflict_fraction > 0
        assert report.holds

    @pytest.mark.parametrize("seed", range(10))
    def test_task_token_step(self, seed):
        report = verify_proposition2(*make_null_instance(seed))
        assert report.range_gradient_norm <= 1e-8
        assert report.stationary
        assert report.loss_after < report.loss_before
        assert report.first_order_error <= 0.1
        assert report.null_conflict_fraction > 0

    def test_identity_modulators_at_optimum_do_not_move(self):
        inst, basis = make_range_instance(0)
        # targets equal to the current outputs: zero gradient, so the loss is unchanged
        from dtme import autodiff as ad
        z = ad.gelu(ad.matmul(ad.Tensor(inst.tokens), inst.shared)).data
        inst.targets = [z @ h for h in inst.heads]
        report = verify_proposition1(inst, basis)
        assert report.gradient_norm_sq == 0.0 and report.loss_after == report.loss_before == 0.0

    def test_zero_task_tokens_with_zero_residual(self):
        inst, basis = make_null_instance(0)
        inst.targets = [inst.tokens @ h for h in inst.heads]
        report = verify_proposition2(inst, basis)
        assert abs(report.decrease) <= 1e-20 and abs(report.predicted_decrease) <= 1e-20

    def test_construction_checks(self):
        inst, basis = make_range_instance(0)
        inst.tokens = inst.tokens + basis.U_N[:, 0]
        with pytest.raises(ContractError):
            verify_proposition1(inst, basis)
        inst2, basis2 = make_null_instance(0)
        inst2.tokens = inst2.tokens + basis2.U_R[:, 0]
        with pytest.raises(ContractError):
            verify_proposition2(inst2, basis2)
        with pytest.raises(ContractError):
            make_null_instance(0, p=8)
