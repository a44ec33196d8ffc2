"""Acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Criteria 8 to 10 share one training suite (three seeds of the kappa = 1
synthetic task set) that takes several minutes on a single core.
"""

import itertools
import time

import numpy as np
import pytest

from dtme.analyzer import detect_conflicts, select_split, spectral_split
from dtme.cli import main
from dtme.expansion import (ExpansionPlan, apply_plan, make_null_instance, make_range_instance,
                            verify_proposition1, verify_proposition2)
from dtme.io import file_sha256
from dtme.model import HeadSpec, ModelConfig, MultiTaskTransformer
from dtme.multitask import (MetricTable, SyntheticDatasetSpec, TaskSpec, delta_m, generate, multitask_loss)
from dtme.trainer import (DTMESettings, TrainConfig, build_model, model_config_for, run_delta_m, train_dtme,
                          train_joint, train_single_task)

from conftest import perturb
from test_analyzer import brute_force_counts, random_psd

SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return report


def test_criterion_01_delta_m_rows(verdict):
    nyud = delta_m(MetricTable.from_values((38.27, 0.6370, 21.64, 57.90), (39.35, 0.6611, 22.14, 59.68),
                                           (False, True, True, False)))
    pascal = delta_m(MetricTable.from_values((66.18, 56.29, 83.41, 15.26, 47.00), (67.96, 58.90, 83.76, 15.65, 47.70),
                                             (False, False, False, True, False)))
    ok = abs(nyud - 0.044) <= 0.001 and abs(pascal + 1.289) <= 0.001
    verdict(1, ok, f"NYUD {nyud:+.4f}% (want +0.044), PASCAL {pascal:+.4f}% (want -1.289)")


def test_criterion_02_spectral_identities(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    monotone = True
    for _ in range(50):
        p = int(rng.integers(1, 65))
        C = random_psd(rng, p, int(rng.integers(1, p + 1)))
        b = spectral_split(C, 100.0)
        I = np.eye(p)
        P_R, P_N = b.range_projector, b.null_projector
        worst = max(worst,
                    np.linalg.norm(b.U @ np.diag(b.eigenvalues) @ b.U.T - C),
                    np.abs(b.U.T @ b.U - I).max(),
                    np.abs(P_R + P_N - I).max(),
                    np.abs(P_R @ P_R - P_R).max(),
                    np.abs(P_N @ P_N - P_N).max())
        ms = [select_split(b.eigenvalues, r) for r in (1, 10, 100, 500, 1000)]
        monotone &= ms == sorted(ms)
    verdict(2, worst <= 1e-8 and monotone, f"worst identity residual {worst:.2e}, m monotone in r: {monotone}")


def test_criterion_03_conflict_oracle(verdict):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(100):
        N, K, p = int(rng.integers(1, 9)), int(rng.integers(2, 5)), int(rng.integers(1, 9))
        basis = spectral_split(random_psd(rng, p, int(rng.integers(1, p + 1))), float(rng.choice([1, 10, 100])))
        grads = [rng.standard_normal((2, N, p)) for _ in range(K)]
        stats = detect_conflicts(grads, basis)
        rc, nc = brute_force_counts(grads, basis)
        mismatches += stats.range_counts != rc or stats.null_counts != nc
    verdict(3, mismatches == 0, f"{mismatches} of 100 instances disagree with the double-loop oracle")


def test_criterion_04_full_model_gradients(verdict):
    rng = np.random.default_rng(4)
    specs = (HeadSpec("class-logits", 3), HeadSpec("regression-vector", 2))
    model = MultiTaskTransformer(ModelConfig(2, 16, 2, 8, 3, specs, mlp_ratio=2), rng)
    apply_plan(model, ExpansionPlan({1: "TM+TE", 2: "TE"}, beta=1.0, tokens_per_task=2))
    perturb(model, rng, 0.1)
    tasks = (TaskSpec(1, "cross-entropy", 3), TaskSpec(2, "mse", 2))
    x = rng.standard_normal((2, 8, 3))
    labels = [rng.integers(0, 3, (2, 8)).astype(float), rng.standard_normal((2, 8, 2))]

    def loss():
        outs, _ = model.forward(x)
        return multitask_loss(outs, labels, tasks)[0]

    for t in model.params.values():
        t.zero_grad()
    loss().backward()
    eps, worst, count = 1e-5, 0.0, 0
    for name, t in model.params.items():
        analytic = t.grad.reshape(-1).copy()
        flat = t.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = loss().item()
            flat[k] = orig - eps
            fm = loss().item()
            flat[k] = orig
            numeric = (fp - fm) / (2 * eps)
            worst = max(worst, abs(analytic[k] - numeric) / max(1.0, abs(numeric)))
            count += 1
    verdict(4, worst <= 1e-4, f"max relative error {worst:.2e} over {count} parameters")


def test_criterion_05_modulator_step(verdict):
    reports = [verify_proposition1(*make_range_instance(seed)) for seed in range(10)]
    ratios = [r.residual_ratio for r in reports]
    ok = all(r.loss_after < r.loss_before for r in reports) and all(3.5 <= x <= 4.5 for x in ratios)
    verdict(5, ok, f"loss decreased on {sum(r.loss_after < r.loss_before for r in reports)}/10, "
                   f"halving ratios in [{min(ratios):.3f}, {max(ratios):.3f}]")


def test_criterion_06_task_token_step(verdict):
    reports = [verify_proposition2(*make_null_instance(seed)) for seed in range(10)]
    stationary = sum(r.stationary for r in reports)
    decreased = sum(r.loss_after < r.loss_before for r in reports)
    verdict(6, stationary == decreased == 10,
            f"shared-token stationary on {stationary}/10, task-token step decreased loss on {decreased}/10 "
            f"(largest frozen-token gradient {max(r.range_gradient_norm for r in reports):.1e})")


def test_criterion_07_neutral_insertion(verdict):
    rng = np.random.default_rng(0)
    specs = tuple(HeadSpec("regression-vector", 2) for _ in range(3))
    base = MultiTaskTransformer(ModelConfig(4, 8, 2, 5, 3, specs, mlp_ratio=2), rng)
    perturb(base, rng, 0.2)
    x = rng.standard_normal((2, 5, 3))
    before = base.predict(x)
    state = base.state_dict()
    worst, plans = 0.0, 0
    for acts in itertools.product(("none", "TM", "TE", "TM+TE"), repeat=4):
        m = MultiTaskTransformer(base.config)
        m.load_state_dict(state)
        apply_plan(m, ExpansionPlan(dict(enumerate(acts, 1)), beta=1.0, tokens_per_task=3))
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(before, m.predict(x))))
        plans += 1
    verdict(7, worst <= 1e-12, f"max output change {worst:.1e} over all {plans} plans on a 4-block model")


def test_criterion_11_overhead(verdict):
    ds = generate(SyntheticDatasetSpec(seed=0, n=8, n_test=4, grid=3, in_dim=5, latent=6, features=3))
    mismatches = []
    for beta, t in itertools.product((0.25, 0.5, 1.0), (1, 3, 6)):
        model = build_model(model_config_for(ds, depth=4, hidden=8, heads=2, mlp_ratio=2), 0)
        base = model.num_parameters()
        rec = train_dtme(model, ds, TrainConfig(steps=2, batch_size=4, timing=0.0),
                         DTMESettings(beta=beta, tokens_per_task=t))
        K, p = len(ds.tasks), 8
        expected = 100.0 * (len(rec.plan.tm_layers) * K * 2 * p + len(rec.plan.te_layers) * K * t * p) / base
        if rec.overhead != expected:
            mismatches.append((beta, t, rec.overhead, expected))
    verdict(11, not mismatches, f"{9 - len(mismatches)}/9 (beta, t) settings match the closed form exactly")


def test_criterion_12_cli_determinism(verdict, tmp_path):
    (tmp_path / "spec.txt").write_text("n = 16\nn_test = 8\ngrid = 3\nin_dim = 5\nlatent = 6\nfeatures = 3\n")
    (tmp_path / "run.txt").write_text("dataset = data/dataset.bin\ndepth = 2\nhidden = 8\nmlp_ratio = 2\n"
                                      "steps = 6\nbatch_size = 4\nmonitor_every = 3\ntokens_per_task = 2\n"
                                      "timing = 0.2\n")
    assert main(["gen-data", "--spec", str(tmp_path / "spec.txt"), "--out", str(tmp_path / "data")]) == 0
    same = []
    for mode in ("joint", "st", "dtme", "pcgrad"):
        digests = []
        for rep in ("a", "b"):
            out = tmp_path / f"{mode}-{rep}"
            assert main(["train", "--mode", mode, "--config", str(tmp_path / "run.txt"), "--out", str(out),
                         "--seed", "5"]) == 0
            digests.append(((out / "losses.csv").read_bytes(), file_sha256(out / "checkpoint.bin")))
        same.append(digests[0] == digests[1])
    verdict(12, all(same), f"repeat runs byte-identical for {sum(same)}/4 modes (joint, st, dtme, pcgrad)")


# ---------------------------------------------------------------------------
# kappa = 1 suite: K=3, D=6, p=32, N=64
# ---------------------------------------------------------------------------

VARIANTS = {
    "tmte": DTMESettings(mechanisms=("TM", "TE")),
    "tm": DTMESettings(mechanisms=("TM",)),
    "te": DTMESettings(mechanisms=("TE",)),
    "reverse": DTMESettings(mechanisms=("TM", "TE"), strategy="reverse"),
    "random": DTMESettings(mechanisms=("TM", "TE"), strategy="random"),
}


def suite_seed(seed):
    ds = generate(SyntheticDatasetSpec(seed=seed, kappa=1.0))
    cfg = TrainConfig(steps=300, lr=1e-3, seed=seed, monitor_every=100, timing=0.05)
    baselines = []
    for i in range(1, len(ds.tasks) + 1):
        model = build_model(model_config_for(ds, tasks=[i]), seed)
        baselines.append(train_single_task(model, ds, i, cfg).metrics[0])
    out = {"seed": seed, "baselines": baselines}
    runs = {"joint": lambda m: train_joint(m, ds, cfg)}
    runs.update({k: (lambda s: lambda m: train_dtme(m, ds, cfg, s))(s) for k, s in VARIANTS.items()})
    for name, run in runs.items():
        start = time.perf_counter()
        rec = run(build_model(model_config_for(ds), seed))
        out[name] = {"delta_m": run_delta_m(rec, baselines, ds.tasks), "reduction": rec.conflict_reduction(),
                     "seconds": time.perf_counter() - start,
                     "plan": None if rec.plan is None else " ".join(rec.plan.actions.values())}
    return out


@pytest.fixture(scope="module")
def suite():
    return [suite_seed(s) for s in SEEDS]


def test_criterion_08_mechanism_comparison(verdict, suite):
    beats_joint = sum(r["tmte"]["delta_m"] > r["joint"]["delta_m"] for r in suite)
    beats_parts = sum(r["tmte"]["delta_m"] >= max(r["tm"]["delta_m"], r["te"]["delta_m"]) for r in suite)
    slowest = max(v["seconds"] for r in suite for k, v in r.items() if isinstance(v, dict))
    rows = "; ".join(f"seed {r['seed']}: " + " ".join(f"{k}={r[k]['delta_m']:+.2f}" for k in ("joint", "tmte", "tm", "te"))
                     for r in suite)
    verdict(8, beats_joint == 3 and beats_parts >= 2 and slowest <= 120,
            f"TM+TE > joint on {beats_joint}/3, TM+TE >= max(TM, TE) on {beats_parts}/3, "
            f"slowest run {slowest:.0f}s [{rows}]")


def test_criterion_09_layer_selection(verdict, suite):
    vs_reverse = sum(r["tmte"]["delta_m"] > r["reverse"]["delta_m"] for r in suite)
    vs_random = sum(r["tmte"]["delta_m"] > r["random"]["delta_m"] for r in suite)
    rows = "; ".join(f"seed {r['seed']}: " + " ".join(f"{k}={r[k]['delta_m']:+.2f}" for k in ("tmte", "reverse", "random"))
                     for r in suite)
    verdict(9, vs_reverse == 3 and vs_random >= 2,
            f"standard beats reverse on {vs_reverse}/3 and random on {vs_random}/3 [{rows}]")


def test_criterion_10_conflict_reduction(verdict, suite):
    tm = np.mean([r["tm"]["reduction"] for r in suite], axis=0)
    te = np.mean([r["te"]["reduction"] for r in suite], axis=0)
    verdict(10, tm[0] > tm[1] and te[1] > te[0],
            f"mean over seeds: TM-only range {tm[0]:+.1f}% vs null {tm[1]:+.1f}%, "
            f"TE-only null {te[1]:+.1f}% vs range {te[0]:+.1f}% [per seed (range, null): "
            + "; ".join(f"TM {r['tm']['reduction'][0]:+.1f}/{r['tm']['reduction'][1]:+.1f} "
                        f"TE {r['te']['reduction'][0]:+.1f}/{r['te']['reduction'][1]:+.1f}" for r in suite) + "]")
