"""Derive the quality tolerances used by the step_ag vs full_cfg acceptance check.

Runs a 5-seed baseline on the canonical preset (vp-linear, T=50, w=7,
n=4000 per class) through a second, brute-force pipeline that shares no
sampling or metric code with the package:

* scores from explicit inverses of the noised covariances, with class
  weights from ``scipy.stats.multivariate_normal`` densities;
* DDIM updates written out by hand on the closed-form vp-linear schedule;
* covariances from ``np.cov``, matrix roots from ``scipy.linalg.sqrtm`` and
  class assignment from direct density evaluation.

The package pipeline is run alongside as a cross-check. Tolerances are
``delta_acc = max |acc_ag - acc_full| + 0.01`` and
``delta_w2 = max w2_ag / w2_full + 0.05`` over seeds and classes. The
derivation log goes to ``tests/data/quality_tolerances.json``.

Usage: python scripts/calibrate_quality_tolerances.py [--out PATH]
"""

import argparse
import json
import math
import time
from pathlib import Path

import numpy as np
from scipy.linalg import sqrtm
from scipy.special import softmax
from scipy.stats import multivariate_normal

from adaguide import bench
from adaguide.score_model import load_model

T, W, N = 50, 7.0, 4000
BETA_MIN, BETA_MAX = 0.1, 20.0
BASE_SEEDS = [20000 * s for s in range(1, 6)]


def vp_linear(t):
    half = 0.5 * (BETA_MIN * t + 0.5 * (BETA_MAX - BETA_MIN) * t * t)
    a = math.exp(-half)
    return a, math.sqrt(1.0 - a * a)


def brute_eps(model, x, t, k):
    """(eps_cond, eps_uncond) for rows of ``x`` at time ``t`` and class index ``k``."""
    a, s = vp_linear(t)
    d = model.dim
    scores, dens = [], []
    for w, mu, cov in zip(model.class_weights, model.means, model.covs):
        c = a * a * cov + s * s * np.eye(d)
        inv = np.linalg.inv(c)
        scores.append((x - a * mu) @ inv.T)
        dens.append(np.log(w) + multivariate_normal(a * mu, c).logpdf(x))
    r = softmax(np.stack(dens, axis=1), axis=1)
    uncond = s * sum(r[:, [j]] * scores[j] for j in range(len(scores)))
    return s * scores[k], uncond


def brute_sample(model, k, p, base_seed):
    ts = [i / T for i in range(T, 0, -1)]
    guided = math.floor(p * T + 1e-9)
    _, s0 = vp_linear(ts[0])
    x = np.stack([s0 * np.random.default_rng(base_seed + i).standard_normal(model.dim) for i in range(N)])
    for i, t in enumerate(ts):
        ec, eu = brute_eps(model, x, t, k)
        eps = eu + W * (ec - eu) if i < guided else ec
        a, s = vp_linear(t)
        x0 = (x - s * eps) / a
        if i + 1 == T:
            x = x0
        else:
            a2, s2 = vp_linear(ts[i + 1])
            x = a2 * x0 + s2 * eps
    return x


def brute_metrics(model, xs):
    """Per-class squared W2 to the target and alignment accuracy over all classes."""
    w2, hits = {}, 0
    for k, (label, x) in enumerate(zip(model.labels, xs)):
        m, c = x.mean(axis=0), np.cov(x, rowvar=False)
        mu, sig = model.means[k], model.covs[k]
        r = sqrtm(sig)
        cross = np.real(sqrtm(r @ c @ r))
        w2[label] = float(np.sum((m - mu) ** 2) + np.trace(c + sig - 2 * cross))
        logp = np.stack(
            [np.log(wj) + multivariate_normal(mj, cj).logpdf(x) for wj, mj, cj in zip(model.class_weights, model.means, model.covs)],
            axis=1,
        )
        hits += int(np.sum(np.argmax(logp, axis=1) == k))
    return w2, hits / (len(xs) * len(xs[0]))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "data" / "quality_tolerances.json"))
    args = ap.parse_args()

    model = load_model("canonical")
    runs, max_dacc, max_ratio, max_pkg_gap = [], 0.0, 0.0, 0.0
    for seed in BASE_SEEDS:
        t0 = time.perf_counter()
        per = {}
        for name, p in (("full_cfg", 1.0), ("step_ag", 0.5)):
            xs = [brute_sample(model, k, p, seed + k * N) for k in range(len(model.labels))]
            per[name] = brute_metrics(model, xs)
            cfg = bench.RunConfig(T=T, w=W, n=N, seed=seed, strategy=name, p=0.5 if name == "step_ag" else None)
            res = bench.run_experiment(cfg, model)
            gap = max(abs(res.quality.per_class[c].w2 - per[name][0][c]) for c in model.labels)
            max_pkg_gap = max(max_pkg_gap, gap, abs(res.quality.alignment_acc - per[name][1]))
        (w2_f, acc_f), (w2_a, acc_a) = per["full_cfg"], per["step_ag"]
        ratios = {c: w2_a[c] / w2_f[c] for c in model.labels}
        dacc = abs(acc_a - acc_f)
        max_dacc, max_ratio = max(max_dacc, dacc), max(max_ratio, *ratios.values())
        runs.append(
            {"base_seed": seed, "acc_full": acc_f, "acc_step_ag": acc_a, "abs_dacc": dacc,
             "w2_full": w2_f, "w2_step_ag": w2_a, "w2_ratio": ratios}
        )
        print(f"seed {seed}: dacc={dacc:.4g} ratios={[round(r, 6) for r in ratios.values()]} "
              f"({time.perf_counter() - t0:.1f}s)")

    log = {
        "setting": {"model": "canonical", "schedule": "vp-linear", "T": T, "w": W, "n_per_class": N,
                    "strategies": ["full_cfg", "step_ag p=0.5 late=conditional"]},
        "rule": "delta_acc = max|dacc| + 0.01; delta_w2 = max(w2_ag / w2_full) + 0.05",
        "runs": runs,
        "max_abs_dacc": max_dacc,
        "max_w2_ratio": max_ratio,
        "max_gap_vs_package_pipeline": max_pkg_gap,
        "delta_acc": max_dacc + 0.01,
        "delta_w2": max_ratio + 0.05,
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(log, indent=2) + "\n")
    print(f"delta_acc={log['delta_acc']!r} delta_w2={log['delta_w2']!r} package gap={max_pkg_gap:.3g}")


if __name__ == "__main__":
    main()
