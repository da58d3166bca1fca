"""Command-line entry point: train / sample / eval / plot over run directories.

Every command exits 0 on success and nonzero with a single `error: ...`
line on stderr otherwise. Commands never mutate their inputs; each one
refreshes the run directory manifest when it finishes.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import evaluation, sampling, schedules, svgplot, training
from .autodiff import Tensor
from .config import (
    ConfigError,
    PRESET_NAMES,
    RunConfig,
    dumps_config,
    load_config,
    loads_config,
    preset,
)
from .rundir import (
    RunDirectory,
    RunDirectoryError,
    format_real,
    format_row,
    read_metrics,
)

EVAL_LOG_NAME = "eval_log.csv"
EVAL_REPORT_NAME = "eval_report.txt"
EVAL_COLUMNS = (
    "checkpoint_iteration",
    "steps",
    "n_samples",
    "seed",
    "energy_distance",
    "mmd_rbf",
    "posterior_mean_norm",
    "posterior_cov_deviation",
    "kl_mean",
    "elbo_lhs",
    "elbo_nld_bound",
    "elbo_violations",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctlab",
        description="Consistency-training laboratory: train, sample, evaluate, plot.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model into a run directory")
    p_train.add_argument("--config", type=Path, help="path to a JSON run configuration")
    p_train.add_argument(
        "--preset", choices=PRESET_NAMES, help="named built-in configuration"
    )
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--run-dir", type=Path, help="output directory (default runs/<name>)")
    p_train.add_argument("--resume", action="store_true", help="resume from the checkpoint")
    p_train.set_defaults(func=cmd_train)

    p_sample = sub.add_parser("sample", help="generate samples from a trained run")
    p_sample.add_argument("--run-dir", type=Path, required=True)
    p_sample.add_argument("--steps", type=int, default=1, help="number of sampling steps")
    p_sample.add_argument("--count", type=int, default=2048, help="number of samples")
    p_sample.add_argument("--seed", type=int, help="sampling seed (default from config)")
    p_sample.add_argument(
        "--tau", type=str, help="comma-separated descending intermediate times"
    )
    p_sample.add_argument("--no-ema", action="store_true", help="use live, not EMA, weights")
    p_sample.add_argument(
        "--data-overlay", action="store_true", help="overlay dataset samples in the SVG"
    )
    p_sample.set_defaults(func=cmd_sample)

    p_eval = sub.add_parser("eval", help="quantitative evaluation of a trained run")
    p_eval.add_argument("--run-dir", type=Path, required=True)
    p_eval.add_argument("--samples", type=int, default=4096)
    p_eval.add_argument("--steps", type=int, default=1)
    p_eval.add_argument("--seed", type=int, default=32)
    p_eval.add_argument(
        "--compare", type=Path, help="second run directory to diff against (delta = this - other)"
    )
    p_eval.set_defaults(func=cmd_eval)

    p_plot = sub.add_parser("plot", help="emit SVG plots for a run directory")
    p_plot.add_argument("--run-dir", type=Path, required=True)
    p_plot.add_argument("--count", type=int, default=512, help="samples in the scatter plot")
    p_plot.add_argument("--seed", type=int, default=32)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        RunDirectoryError,
        training.CheckpointMismatch,
        training.TrainingDiverged,
        ValueError,
        OSError,
    ) as err:
        message = " ".join(str(err).split())
        print(f"error: {message}", file=sys.stderr)
        return 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _effective_config(args) -> tuple[RunConfig, bytes]:
    if bool(args.config) == bool(args.preset):
        raise ConfigError("provide exactly one of --config or --preset")
    if args.config:
        raw = Path(args.config).read_bytes()
        cfg = loads_config(raw.decode("utf-8"))
    else:
        cfg = preset(args.preset)
        raw = dumps_config(cfg).encode("utf-8")
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed).validate()
        raw = dumps_config(cfg).encode("utf-8")
    return cfg, raw


def cmd_train(args) -> int:
    if args.resume:
        run_dir = args.run_dir
        if run_dir is None:
            raise ConfigError("--resume requires --run-dir")
        run = RunDirectory(run_dir)
        cfg = loads_config(run.config_path.read_text(encoding="utf-8"))
        if args.config or args.preset:
            override, _ = _effective_config(args)
            if override != cfg:
                raise ConfigError(
                    "supplied config disagrees with the run directory snapshot"
                )
        with run.acquire_lock():
            state = training.run_training(cfg, run, resume=True)
            run.update_manifest("train")
    else:
        cfg, raw = _effective_config(args)
        run_dir = args.run_dir or Path("runs") / cfg.name
        run = RunDirectory(run_dir, create=True)
        with run.acquire_lock():
            run.write_config_snapshot(raw)
            state = training.run_training(cfg, run, resume=False)
            run.update_manifest("train")
    print(f"trained to iteration {state.k} in {run.path}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _open_run(run_dir) -> tuple[RunDirectory, RunConfig, training.TrainSetup, training.TrainState]:
    run = RunDirectory(run_dir)
    if not run.config_path.exists():
        raise RunDirectoryError(f"{run.path} has no config snapshot")
    cfg = loads_config(run.config_path.read_text(encoding="utf-8"))
    if not run.checkpoint_path.exists():
        raise RunDirectoryError(f"{run.path} has no checkpoint")
    setup = training.TrainSetup(cfg)
    state = training.load_checkpoint(run.checkpoint_path, expected_config=cfg)
    return run, cfg, setup, state


def _tau_points(cfg: RunConfig, setup, steps: int, tau_arg) -> tuple[float, ...]:
    if tau_arg:
        taus = tuple(float(v) for v in tau_arg.split(","))
    elif steps <= 1:
        taus = ()
    elif steps == 2:
        taus = (cfg.two_step_tau,)
    else:
        grid = schedules.karras_grid(
            steps + 1, cfg.kernel.sigma_min, cfg.kernel.sigma_max, cfg.schedule.rho
        )
        taus = tuple(float(s) for s in grid.sigmas[1:-1][::-1])
    if len(taus) != steps - 1:
        raise ConfigError(f"{steps}-step sampling needs {steps - 1} intermediate times")
    return taus


def _write_samples_csv(path, samples: np.ndarray) -> None:
    dim = samples.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(f"c{i}" for i in range(dim)) + "\n")
        for row in samples:
            fh.write(",".join(format_real(v) for v in row) + "\n")


def cmd_sample(args) -> int:
    run, cfg, setup, state = _open_run(args.run_dir)
    if args.count <= 0:
        raise ConfigError("--count must be positive")
    taus = _tau_points(cfg, setup, args.steps, args.tau)
    seed = cfg.sample_seed if args.seed is None else args.seed
    sampler_cfg = sampling.SamplerConfig(
        time_points=taus, use_ema=not args.no_ema, seed=seed
    )
    rng = np.random.default_rng(seed)
    with run.acquire_lock():
        samples, noise = sampling.generate_from_state(
            setup, state, sampler_cfg, args.count, rng, return_noise=True
        )
        csv_path = run.file(f"samples_{args.steps}.csv")
        _write_samples_csv(csv_path, samples)
        if samples.shape[1] == 2:
            layers = []
            if args.data_overlay:
                overlay = setup.dataset.sample(
                    min(args.count, 2048), np.random.default_rng([seed, 0xDA7A])
                )
                layers.append(
                    {"kind": "points", "xy": overlay, "color": "#bbbbbb", "label": "data"}
                )
            cap = min(len(samples), 1024)
            layers.append(
                {
                    "kind": "segments",
                    "a": noise[:cap],
                    "b": samples[:cap],
                    "color": "#999999",
                }
            )
            layers.append(
                {"kind": "points", "xy": samples[:cap], "color": "#1f6fb2", "label": "samples"}
            )
            svgplot.scatter_plot(
                run.file(f"samples_{args.steps}.svg"),
                layers,
                title=f"{cfg.name}: {args.steps}-step generation",
                xlabel="c0",
                ylabel="c1",
            )
        run.update_manifest("sample")
    print(f"wrote {csv_path}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _build_report(
    cfg: RunConfig,
    setup: training.TrainSetup,
    state: training.TrainState,
    n_samples: int,
    steps: int,
    seed: int,
) -> evaluation.EvalReport:
    taus = () if steps <= 1 else (cfg.two_step_tau,)
    sampler_cfg = sampling.SamplerConfig(time_points=taus, use_ema=True, seed=seed)
    rng = np.random.default_rng(seed)
    generated = sampling.generate_from_state(setup, state, sampler_cfg, n_samples, rng)
    reference = setup.dataset.sample(n_samples, np.random.default_rng([seed, 0xDA7A]))
    ed = evaluation.energy_distance(generated, reference)
    mmd = evaluation.mmd_rbf(generated, reference)
    diag_rng = np.random.default_rng([seed, 0xD1A6])
    diag_data = setup.dataset.sample(min(n_samples, 2048), diag_rng)
    if state.phi is not None:
        mean_norm, cov_dev, kl_mean = evaluation.posterior_prior_diagnostics(
            setup.encoder, state.phi_ema, diag_data, diag_rng, cfg.kl_reduction
        )
        posterior = setup.encoder.forward(state.phi_ema, Tensor(diag_data[:64]))
        eps = diag_rng.standard_normal(posterior.mean.shape)
        x1_chain = posterior.mean.data + posterior.scale.data * eps
    else:
        x1 = diag_rng.standard_normal(diag_data.shape)
        mean_norm = float(np.linalg.norm(x1.mean(axis=0)))
        cov = np.atleast_2d(np.cov(x1, rowvar=False))
        cov_dev = float(np.linalg.norm(cov - np.eye(cov.shape[0]), ord="fro"))
        kl_mean = 0.0
        x1_chain = x1[:64]
    chain = evaluation.check_elbo_chain(
        setup.net,
        state.theta_ema,
        setup.kernel,
        diag_data[:64],
        x1_chain,
        ns=(4, 16, 64),
        decoder_sigma=cfg.kernel.sigma_data,
        kl_mean=kl_mean,
    )
    extras = {f"elbo_rhs_n{n}": v for n, v in chain.rhs_per_n.items()}
    return evaluation.EvalReport(
        energy_distance=ed,
        mmd_rbf=mmd,
        posterior_mean_norm=mean_norm,
        posterior_cov_deviation=cov_dev,
        kl_mean=kl_mean,
        elbo_lhs=chain.lhs,
        elbo_nld_bound=chain.nld_bound,
        elbo_violations=chain.violations,
        n_samples=n_samples,
        steps=steps,
        seed=seed,
        extras=extras,
    )


def _append_eval_row(run: RunDirectory, state, report: evaluation.EvalReport) -> None:
    path = run.file(EVAL_LOG_NAME)
    if not path.exists():
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(EVAL_COLUMNS) + "\n")
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(
            format_row(
                (
                    state.k,
                    report.steps,
                    report.n_samples,
                    report.seed,
                    report.energy_distance,
                    report.mmd_rbf,
                    report.posterior_mean_norm,
                    report.posterior_cov_deviation,
                    report.kl_mean,
                    report.elbo_lhs,
                    report.elbo_nld_bound,
                    report.elbo_violations,
                )
            )
        )


def cmd_eval(args) -> int:
    run, cfg, setup, state = _open_run(args.run_dir)
    with run.acquire_lock():
        report = _build_report(cfg, setup, state, args.samples, args.steps, args.seed)
        evaluation.write_report(run.file(EVAL_REPORT_NAME), report)
        _append_eval_row(run, state, report)
        if args.compare:
            _, other_cfg, other_setup, other_state = _open_run(args.compare)
            other = _build_report(
                other_cfg, other_setup, other_state, args.samples, args.steps, args.seed
            )
            lines = [
                "# delta = this_run - compare_run; negative means this run lower (better",
                "# for the distance-like metrics energy_distance / mmd_rbf / kl_mean)",
            ]
            for (key, mine), (_, theirs) in zip(report.as_items(), other.as_items()):
                if key in ("n_samples", "steps", "seed") or key.startswith("elbo_rhs"):
                    continue
                lines.append(f"{key} = {format_real(mine - theirs)}")
            run.file("comparison.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.update_manifest("eval")
    print(f"energy_distance = {format_real(report.energy_distance)}")
    return 0


# ---------------------------------------------------------------------------
# plot
# ---------------------------------------------------------------------------


def cmd_plot(args) -> int:
    run = RunDirectory(args.run_dir)
    if not run.metrics_path.exists():
        raise RunDirectoryError(f"{run.path} has no metrics CSV")
    cols = read_metrics(run.metrics_path)
    iters = cols["iteration"]
    with run.acquire_lock():
        svgplot.line_plot(
            run.file("variance.svg"),
            [
                ("probe", iters, cols["grad_var_probe"]),
                ("ema(0.9)", iters, cols["grad_var_ema"]),
            ],
            title="gradient variance",
            xlabel="iteration",
            ylabel="mean per-coordinate variance",
            log_y=True,
        )
        svgplot.line_plot(
            run.file("loss.svg"),
            [
                ("total", iters, cols["loss_total"]),
                ("consistency", iters, cols["loss_consistency"]),
                ("kl", iters, cols["loss_kl"]),
            ],
            title="training loss",
            xlabel="iteration",
            ylabel="loss",
        )
        _plot_scatter_coupling(run, args.count, args.seed)
        run.update_manifest("plot")
    print(f"wrote plots in {run.path}")
    return 0


def _plot_scatter_coupling(run: RunDirectory, count: int, seed: int) -> None:
    """Fig-style scatter: samples tied to their input noise, posterior ellipses."""
    layers: list[dict] = []
    title = "coupling scatter"
    if run.config_path.exists() and run.checkpoint_path.exists():
        cfg = loads_config(run.config_path.read_text(encoding="utf-8"))
        setup = training.TrainSetup(cfg)
        state = training.load_checkpoint(run.checkpoint_path, expected_config=cfg)
        title = f"{cfg.name}: 1-step samples and input noise"
        rng = np.random.default_rng(seed)
        sampler_cfg = sampling.SamplerConfig(time_points=(), use_ema=True, seed=seed)
        samples, noise = sampling.generate_from_state(
            setup, state, sampler_cfg, count, rng, return_noise=True
        )
        if samples.shape[1] == 2:
            data = setup.dataset.sample(count, np.random.default_rng([seed, 0xDA7A]))
            layers.append({"kind": "points", "xy": data, "color": "#cccccc", "label": "data"})
            layers.append({"kind": "segments", "a": noise, "b": samples, "color": "#999999"})
            layers.append(
                {"kind": "points", "xy": noise, "color": "#c88a2d", "label": "input noise"}
            )
            layers.append(
                {"kind": "points", "xy": samples, "color": "#1f6fb2", "label": "samples"}
            )
            if state.phi is not None:
                comp_means = setup.dataset.component_means()
                posterior = setup.encoder.forward(state.phi_ema, Tensor(comp_means))
                smax = setup.kernel.sigma_max
                for ci in range(len(comp_means)):
                    center = smax * posterior.mean.data[ci]
                    radii = smax * posterior.scale.data[ci]
                    layers.append(
                        {
                            "kind": "ellipses",
                            "centers": [center, center],
                            "radii": [radii, 2.0 * radii],
                            "color": svgplot.PALETTE[1 + ci % 2],
                            "label": f"posterior at component {ci}",
                        }
                    )
    svgplot.scatter_plot(
        run.file("scatter_coupling.svg"), layers, title=title, xlabel="c0", ylabel="c1"
    )


if __name__ == "__main__":
    sys.exit(main())
