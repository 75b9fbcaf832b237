"""SNR curves for every schedule and mean cosine-similarity curves.

Writes ``results/snr_curves.csv`` (with a ``.meta.json`` sidecar giving the
SNR = 1 crossing per schedule) and one ``results/gamma_<schedule>.csv`` per
schedule for the canonical preset under full guidance.

Usage: python scripts/make_curves.py [--T 50] [--n-avg 20] [--out-dir results]
"""

import argparse
import json
from pathlib import Path

from adaguide.bench import RunConfig, emit_gamma_curves, emit_snr_curves
from adaguide.scheduler import KINDS, NoiseSchedule
from adaguide.score_model import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--T", type=int, default=50)
    ap.add_argument("--dense-T", type=int, default=1000)
    ap.add_argument("--n-avg", type=int, default=20)
    ap.add_argument("--model", default="canonical")
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()

    out_dir = Path(args.out_dir)
    snr_path = emit_snr_curves([NoiseSchedule(k) for k in KINDS], args.T, out_dir / "snr_curves.csv", args.dense_T)
    meta = json.loads(snr_path.with_suffix(".csv.meta.json").read_text())
    for name, info in meta["snr_one"].items():
        print(f"{name:15s} SNR=1 at t={info['t']:.4f} (fraction {info['fraction']:.3f}, "
              f"{info['inference_steps_not_exceeding']}/{args.T} steps at or below)")

    model = load_model(args.model)
    for kind in KINDS:
        cfg = RunConfig(model=args.model, schedule=kind, T=args.T, strategy="full_cfg", diag=True)
        path = emit_gamma_curves(cfg, out_dir / f"gamma_{kind}.csv", n_avg=args.n_avg, model=model)
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
