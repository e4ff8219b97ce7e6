"""Acceptance suite: one test group per numbered criterion.

Every check records a PASS/FAIL line before asserting; the lines are printed in
the terminal summary (see ``conftest.py``), so a plain ``pytest`` run ends with
one verdict per criterion.
"""

import json
import math
import shutil
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from oodcl.autodiff import concat, normalize_rows
from oodcl.cli import EXIT_OK, main
from oodcl.config import RunConfig
from oodcl.data import gen_ood_dataset
from oodcl.embedding import log_sum_exp
from oodcl.experiment import derived_seed, evaluate_model, generate_datasets, train_variant
from oodcl.losses import (
    EnergyBaselineConfig,
    LossWeights,
    ce_loss,
    energy_margin_loss,
    energy_scores,
    ood_encoder_contrast,
    ood_head_contrast,
    supcon_loss,
    supcon_loss_decomposed,
    tightness_loss,
    total_loss,
)
from oodcl.metrics import aupr, auroc, fpr_at_95
from oodcl.network import NetworkDims, encode, gradient, init_params, project
from oodcl.prototypes import PrototypeSet, classify, scale_prototypes, scores_from_logits
from oodcl.pseudo_ood import MixupConfig, mix_features, mixup_pseudo_ood, nearest_other_class, sample_lambdas
from oodcl.trainer import evaluate

from conftest import record
from oracles import ap_step, central_differences_many, fpr_scan, partner_scan, relative_error, roc_trapezoid, solve_mix

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(__file__).parent / "data"
BENCHMARK = ROOT / "configs" / "benchmark.conf"


def check(criterion: str, ok: bool, detail: str) -> None:
    record(criterion, bool(ok), detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 1. gradient correctness

FD_DIMS = NetworkDims(8, 16, 8, 4)
FD_K, FD_BATCH, FD_CONFIGS = 4, 16, 100
LOSS_NAMES = ("supcon", "proto_tightness", "ood_head", "ood_encoder", "total_psupcon",
              "total_opsupcon_r", "total_opsupcon_p", "total_opsupcon_m", "ce", "energy_margin")
KINK_MARGIN, MIN_NORM = 1e-3, 0.1


def fd_config(rng):
    """One random configuration, or None if it sits too close to a kink for central differences."""
    arrays = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in init_params(FD_DIMS, int(rng.integers(2**31))).arrays.items()}
    arrays["protos"] = normalize_rows(rng.standard_normal((FD_K, FD_DIMS.feat_dim)))
    arrays["classifier"] = rng.standard_normal((FD_K, FD_DIMS.feat_dim))
    x = rng.standard_normal((FD_BATCH, FD_DIMS.input_dim)) * rng.uniform(0.5, 3.0)
    xo = rng.standard_normal((FD_BATCH, FD_DIMS.input_dim)) * rng.uniform(0.5, 3.0)
    y = rng.permutation(np.repeat(np.arange(FD_K), FD_BATCH // FD_K))
    tau = rng.uniform(0.05, 1.0)
    alpha, gamma = rng.uniform(0.05, 1.0), rng.uniform(0.1, 2.0)
    s, temp = rng.uniform(1.0, 10.0), rng.uniform(0.5, 2.0)

    # reject ReLU preactivations and hinge arguments within reach of h, and tiny norms
    near = []
    for inputs in (x, xo):
        h1 = inputs @ arrays["enc_w1"] + arrays["enc_b1"]
        v = np.maximum(h1, 0) @ arrays["enc_w2"] + arrays["enc_b2"]
        f = v / np.linalg.norm(v, axis=1, keepdims=True)
        h2 = f @ arrays["head_w1"] + arrays["head_b1"]
        u = np.maximum(h2, 0) @ arrays["head_w2"] + arrays["head_b2"]
        near += [np.abs(h1).min(), np.abs(h2).min()]
        if min(np.linalg.norm(v, axis=1).min(), np.linalg.norm(u, axis=1).min()) < MIN_NORM:
            return None
    f0 = encode(arrays, x)
    pseudo = mixup_pseudo_ood(f0, y, MixupConfig(), rng)
    hp = pseudo @ arrays["head_w1"] + arrays["head_b1"]
    near.append(np.abs(hp).min())
    if np.linalg.norm(np.maximum(hp, 0) @ arrays["head_w2"] + arrays["head_b2"], axis=1).min() < MIN_NORM:
        return None
    e_id = energy_scores(f0 @ (s * arrays["protos"]).T, temp)
    e_ood = energy_scores(encode(arrays, xo) @ (s * arrays["protos"]).T, temp)
    ebc = EnergyBaselineConfig(float(np.median(e_id)), float(np.median(e_ood)), temp, s)
    near += [np.abs(e_id - ebc.m_in).min(), np.abs(e_ood - ebc.m_out).min()]
    if min(near) < KINK_MARGIN:
        return None

    def weights(variant):
        return LossWeights(tau, alpha, gamma, variant)

    def losses(t):
        f, fo = encode(t, x), encode(t, xo)
        z, zo = project(t, f), project(t, fo)
        p = t["protos"]
        # pseudo features are constants of the step, exactly as in training
        zp = project(t, pseudo)
        both_f = concat([fo, pseudo])
        both_z = project(t, both_f)
        return [
            supcon_loss(z, y, tau),
            tightness_loss(f, y, p),
            ood_head_contrast(zo, z, tau),
            ood_encoder_contrast(fo, p, tau),
            total_loss(z, y, f, None, None, p, weights("psupcon")),
            total_loss(z, y, f, fo, zo, p, weights("opsupcon-r")),
            total_loss(z, y, f, pseudo, zp, p, weights("opsupcon-p")),
            total_loss(z, y, f, both_f, both_z, p, weights("opsupcon-m")),
            ce_loss(f @ t["classifier"].T, y),
            energy_margin_loss(f @ (p * s).T, fo @ (p * s).T, ebc),
        ]

    return arrays, losses


def test_criterion_1_gradients_match_finite_differences():
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst = dict.fromkeys(LOSS_NAMES, 0.0)
    done = rejected = 0
    while done < FD_CONFIGS:
        cfg = fd_config(rng)
        if cfg is None:
            rejected += 1
            continue
        arrays, losses = cfg
        numeric = central_differences_many(lambda a: losses(a), arrays)
        for i, name in enumerate(LOSS_NAMES):
            _, analytic = gradient(arrays, lambda t, i=i: losses(t)[i])
            worst[name] = max(worst[name], relative_error(analytic, numeric[i]))
        done += 1
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    check("1", ok, f"{done} configs x {len(LOSS_NAMES)} losses ({rejected} near-kink draws redrawn), "
                   f"worst rel err {worst[top]:.2e} ({top}) < 1e-4, {elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# 2. SupCon decomposition

def test_criterion_2_supcon_decomposition():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 65))
        z = normalize_rows(rng.standard_normal((n, int(rng.integers(2, 17)))))
        y = rng.integers(0, int(rng.integers(1, 6)), n)
        if np.bincount(y).max() < 2:
            y[1] = y[0]
        tau = float(rng.uniform(0.05, 2.0))
        t, c = supcon_loss_decomposed(z, y, tau)
        worst = max(worst, abs(t + c - supcon_loss(z, y, tau)))
    check("2", worst <= 1e-9, f"100 batches, max |tightness + contrast - supcon| = {worst:.1e} <= 1e-9")


# ---------------------------------------------------------------------------
# 3. metric oracles

def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst = {"auroc": 0.0, "fpr95": 0.0, "aupr": 0.0}
    for _ in range(1000):
        n_id, n_ood = (int(v) for v in rng.integers(1, 201, 2))
        levels = int(rng.integers(1, 30))  # few levels means heavy ties
        if rng.random() < 0.5:
            ids, oods = rng.integers(0, levels, n_id) / 3.0, rng.integers(-2, levels - 2, n_ood) / 3.0
        else:
            ids, oods = rng.normal(0.5, 1, n_id).round(1), rng.normal(0, 1, n_ood).round(1)
        worst["auroc"] = max(worst["auroc"], abs(auroc(ids, oods) - roc_trapezoid(ids, oods)))
        worst["fpr95"] = max(worst["fpr95"], abs(fpr_at_95(ids, oods) - fpr_scan(ids, oods)))
        worst["aupr"] = max(worst["aupr"], abs(aupr(ids, oods) - ap_step(ids, oods)))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and elapsed < 30
    check("3", ok, "1000 tied score sets, max deviation " +
          ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" <= 1e-9, {elapsed:.1f}s < 30s")


# ---------------------------------------------------------------------------
# 4. numerical stability

def test_criterion_4_stability_at_tiny_tau():
    rng = np.random.default_rng(4)
    tau = 1e-3
    values = []
    for _ in range(50):
        z = normalize_rows(rng.standard_normal((12, 6)))
        z[1] = z[0]  # an exact positive pair: similarity 1, logit 1e3
        y = np.array([0, 0, 1, 1, 2, 2, 0, 1, 2, 3, 3, 0])
        zo = normalize_rows(rng.standard_normal((5, 6)))
        protos = normalize_rows(rng.standard_normal((4, 6)))
        big = (z @ protos.T) / tau
        values += [
            log_sum_exp(big[0]), log_sum_exp(-big[0]),
            supcon_loss(z, y, tau), *supcon_loss_decomposed(z, y, tau),
            tightness_loss(z, y, protos), ood_head_contrast(zo, z, tau), ood_encoder_contrast(zo, protos, tau),
            ce_loss(big, y), ce_loss(-big, y),
            energy_margin_loss(big, -big[:5], EnergyBaselineConfig(-5.0, 5.0)),
        ]
        for variant in ("psupcon", "opsupcon-r", "opsupcon-p", "opsupcon-m"):
            values.append(total_loss(z, y, z, zo, zo, protos, LossWeights(tau, 0.1, 1.0, variant)))
        for fn in ("maxlogit", "msp", "energy"):
            values += list(scores_from_logits(big, fn, 1.0)) + list(scores_from_logits(z @ protos.T, fn, tau))
    finite = all(math.isfinite(float(v)) for v in values)
    check("4", finite, f"{len(values)} LSE/loss/score values with logits up to 1e3 (tau=1e-3), all finite")


# ---------------------------------------------------------------------------
# 5. pseudo-OOD geometry

def test_criterion_5_pseudo_ood_properties():
    rng = np.random.default_rng(5)
    cfg = MixupConfig()
    lo, hi = cfg.clamp_range
    worst_resid, failures, n_feats = 0.0, 0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        f = normalize_rows(rng.standard_normal((n, int(rng.integers(2, 12)))))
        y = rng.integers(0, int(rng.integers(2, 6)), n)
        y[:2] = [0, 1]
        partners = nearest_other_class(f, y)
        lam = sample_lambdas(n, cfg, rng)
        out = mix_features(f, partners, lam)
        oracle = partner_scan(f.tolist(), y.tolist())
        if partners.tolist() != oracle or np.any(y[partners] == y):
            failures += 1
        for i, j in enumerate(partners):
            got, resid = solve_mix(out[i], f[i], f[j])
            worst_resid = max(worst_resid, resid)
            if not (lo - 1e-9 <= got <= hi + 1e-9 and abs(got - lam[i]) < 1e-6):
                failures += 1
        n_feats += n
    ok = failures == 0 and worst_resid < 1e-9
    check("5", ok, f"1000 batches / {n_feats} features: {failures} partner or lambda mismatches, "
                   f"max segment residual {worst_resid:.1e} < 1e-9")


# ---------------------------------------------------------------------------
# 6. synthetic benchmark

@pytest.fixture(scope="module")
def benchmark():
    """Train PSupCon, OPSupCon-P, OPSupCon-R and CE at the published seed and three more."""
    base = RunConfig.load(BENCHMARK)
    seeds = [base.seed + i for i in range(4)]
    start = time.perf_counter()
    runs = {}
    for seed in seeds:
        cfg = RunConfig.load(BENCHMARK, {"seed": str(seed)})
        data = generate_datasets(cfg)
        held = gen_ood_dataset(cfg["data.aux_ood"], cfg.synthetic_spec(), derived_seed(seed, 13),
                               cfg["data.ood_samples"])
        held.name = "heldout-test"
        psup = train_variant(cfg, "psupcon", data)
        models = {
            "psupcon": psup,
            "opsupcon-p": train_variant(cfg, "opsupcon-p", data, pretrained=psup),
            "opsupcon-r": train_variant(cfg, "opsupcon-r", data, pretrained=psup),
            "ce": train_variant(cfg, "ce", data),
        }
        runs[seed] = {
            name: {
                "report": evaluate_model(cfg, m, data, name, cfg.score_function()),
                "held_fpr": evaluate(m, data.test, [held]).average["fpr_at_95"],
                "history": m.history,
            }
            for name, m in models.items()
        }
    return {"seeds": seeds, "runs": runs, "elapsed": time.perf_counter() - start}


def _quantities(run):
    avg = {v: r["report"]["sets"]["average"] for v, r in run.items()}
    return {
        "a": run["psupcon"]["report"]["accuracy"],
        "b": (avg["opsupcon-p"]["fpr95"], avg["psupcon"]["fpr95"]),
        "c": (run["opsupcon-r"]["held_fpr"], run["opsupcon-p"]["held_fpr"]),
        "d": (avg["ce"]["auroc"], avg["psupcon"]["auroc"]),
    }


SUB = {
    "a": ("PSupCon accuracy >= 0.95", lambda q: q["a"] >= 0.95),
    "b": ("FPR95(P) <= 0.8 x FPR95(PSupCon)", lambda q: q["b"][0] <= 0.8 * q["b"][1]),
    "c": ("heldout FPR95(R) <= FPR95(P)", lambda q: q["c"][0] <= q["c"][1]),
    "d": ("AUROC(CE) <= AUROC(PSupCon)", lambda q: q["d"][0] <= q["d"][1]),
}


def _fmt(q, key):
    v = q[key]
    return f"{v:.4f}" if key == "a" else f"{v[0]:.4f} vs {v[1]:.4f}"


@pytest.mark.slow
@pytest.mark.parametrize("key", list(SUB))
def test_criterion_6_benchmark(benchmark, key):
    seeds, runs = benchmark["seeds"], benchmark["runs"]
    fixed = _quantities(runs[seeds[0]])
    reps = [_quantities(runs[s]) for s in seeds[1:]]
    if key == "a":
        median = {"a": statistics.median(q["a"] for q in reps)}
    else:
        median = {key: tuple(statistics.median(q[key][i] for q in reps) for i in range(2))}
    label, rule = SUB[key]
    ok_fixed, ok_median = rule(fixed), rule(median)
    in_time = benchmark["elapsed"] < 300
    check(f"6{key}", ok_fixed and ok_median and in_time,
          f"{label}: seed {seeds[0]} {_fmt(fixed, key)} [{'ok' if ok_fixed else 'violated'}], "
          f"median of seeds {seeds[1]}-{seeds[-1]} {_fmt(median, key)} [{'ok' if ok_median else 'violated'}], "
          f"{benchmark['elapsed']:.0f}s < 300s")


@pytest.mark.slow
def test_benchmark_training_curves(benchmark):
    """Pretraining loss falls over the first epochs; the finetuned OOD head term falls overall."""
    run = benchmark["runs"][benchmark["seeds"][0]]
    pre = [r.losses["total"] for r in run["psupcon"]["history"][:5]]
    assert all(b <= a for a, b in zip(pre, pre[1:])), pre
    for variant in ("opsupcon-p", "opsupcon-r"):
        head = [r.losses["ood_head"] for r in run[variant]["history"] if r.phase == "finetune"]
        assert head[-1] < head[0], (variant, head[0], head[-1])


# ---------------------------------------------------------------------------
# 7. scoring invariances

def test_criterion_7_scoring_invariances():
    rng = np.random.default_rng(7)
    protos = PrototypeSet.from_raw(rng.standard_normal((6, 10)), range(6))
    f = normalize_rows(rng.standard_normal((1000, 10)))
    base = classify(f, protos)
    changed = sum(int(np.any(classify(f, scale_prototypes(protos, s)) != base)) for s in (0.1, 1.0, 10.0))
    worst = 0.0
    for _ in range(1000):
        lg, c = rng.normal(0, 5, 6), rng.normal(0, 100)
        for t in (0.5, 1.0, 2.0):
            worst = max(worst, abs(scores_from_logits(lg + c, "msp", t) - scores_from_logits(lg, "msp", t)))
    check("7", changed == 0 and worst <= 1e-9,
          f"classify unchanged under s in {{0.1, 1, 10}} for 1000 inputs; max MSP shift deviation {worst:.1e} <= 1e-9")


# ---------------------------------------------------------------------------
# 8 and 9. CLI determinism and golden report

def _cli_run(root: Path, variant: str) -> tuple[bytes, bytes]:
    root.mkdir(parents=True, exist_ok=True)
    conf = root / "mini.conf"
    shutil.copy(DATA / "mini.conf", conf)
    assert main(["gen-data", "--config", str(conf)]) == EXIT_OK
    assert main(["train", "--config", str(conf), "--variant", variant]) == EXIT_OK
    ckpt = root / "mini-runs" / f"{variant}.ckpt"
    report = root / "mini-runs" / f"{variant}.report.json"
    assert main(["eval", "--config", str(conf), str(ckpt), "--report", str(report)]) == EXIT_OK
    return ckpt.read_bytes(), report.read_bytes()


def test_criterion_8_determinism(tmp_path):
    same = []
    for variant in ("opsupcon-m", "energy"):
        first = _cli_run(tmp_path / f"a-{variant}", variant)
        second = _cli_run(tmp_path / f"b-{variant}", variant)
        same.append(first == second)
    check("8", all(same), "train + eval run twice (opsupcon-m, energy): checkpoints and reports byte-identical")


def test_criterion_9_golden_report(tmp_path):
    _, report = _cli_run(tmp_path, "opsupcon-r")
    golden = (DATA / "mini_golden.json").read_bytes()
    json.loads(report)
    check("9", report == golden, "mini config opsupcon-r report equals tests/data/mini_golden.json byte for byte")
