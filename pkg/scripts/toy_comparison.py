#!/usr/bin/env python3
"""Train variational-coupling and independent-coupling toy runs over several
seeds and compare their 1-step / 2-step generation quality by energy distance.

Reproduces the two-Gaussian experiment: for each seed the script trains both
presets, samples, and prints a per-seed table plus majority verdicts
(variational beats independent on 1-step; 2-step beats 1-step for the
variational runs).

Usage:
    python scripts/toy_comparison.py --out results/toy --seeds 0 1 2 3 4
    python scripts/toy_comparison.py --out /tmp/quick --seeds 0 --iterations 8000
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from ctlab import evaluation, sampling, training
from ctlab.config import dumps_config, preset
from ctlab.rundir import RunDirectory


def train_run(name: str, base_preset: str, seed: int, iterations: int | None, out: Path):
    cfg = preset(base_preset)
    overrides = {"seed": seed, "name": name}
    if iterations is not None:
        overrides["iterations"] = iterations
    cfg = dataclasses.replace(cfg, **overrides).validate()
    run = RunDirectory(out / name, create=True)
    if run.checkpoint_path.exists():
        state = training.load_checkpoint(run.checkpoint_path)
        if state.k >= cfg.iterations:
            print(f"  [cached] {name}")
            return cfg, training.TrainSetup(cfg), state
    run.write_config_snapshot(dumps_config(cfg).encode())
    t0 = time.perf_counter()
    state = training.run_training(cfg, run, resume=False)
    print(f"  trained {name} in {time.perf_counter() - t0:.0f}s")
    return cfg, training.TrainSetup(cfg), state


def eval_run(cfg, setup, state, n: int, sample_seed: int, data_seed: int):
    ref = setup.dataset.sample(n, np.random.default_rng(data_seed))
    one = sampling.generate_from_state(
        setup, state, sampling.SamplerConfig(), n, np.random.default_rng(sample_seed)
    )
    two = sampling.generate_from_state(
        setup,
        state,
        sampling.SamplerConfig(time_points=(cfg.two_step_tau,)),
        n,
        np.random.default_rng(sample_seed),
    )
    return (
        evaluation.energy_distance(one, ref),
        evaluation.energy_distance(two, ref),
    )


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("results/toy"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, help="override preset iteration count")
    ap.add_argument("--samples", type=int, default=8192)
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    rows = []
    for seed in args.seeds:
        print(f"seed {seed}:")
        vc = train_run(f"vc-seed{seed}", "toy-appendix-e", seed, args.iterations, args.out)
        ind = train_run(
            f"independent-seed{seed}", "toy-independent", seed, args.iterations, args.out
        )
        vc1, vc2 = eval_run(*vc, args.samples, sample_seed=32, data_seed=10_000 + seed)
        in1, in2 = eval_run(*ind, args.samples, sample_seed=32, data_seed=10_000 + seed)
        rows.append(
            {
                "seed": seed,
                "vc_1step": vc1,
                "vc_2step": vc2,
                "independent_1step": in1,
                "independent_2step": in2,
            }
        )
        print(
            f"  energy distance  vc: {vc1:.5f} / {vc2:.5f}   independent: {in1:.5f} / {in2:.5f}"
        )

    (args.out / "comparison.json").write_text(json.dumps(rows, indent=2) + "\n")
    vc_wins = sum(r["vc_1step"] < r["independent_1step"] for r in rows)
    two_wins = sum(r["vc_2step"] < r["vc_1step"] for r in rows)
    print(f"\nvariational beats independent (1-step): {vc_wins}/{len(rows)} seeds")
    print(f"2-step beats 1-step (variational):       {two_wins}/{len(rows)} seeds")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
