"""Command-line runner: ``train``, ``verify`` and ``tim``.

Exit status: 0 success, 1 failed verification, 2 invalid configuration,
3 aborted run (partial outputs are kept).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import ConfigError, RunConfig
from .records import METRIC_KEYS, RecordWriter, write_csv, write_json, write_plot_data

log = logging.getLogger("gdsd_lab")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORTED = 0, 1, 2, 3
THREADS_ENV = "GDSD_LAB_THREADS"


def worker_cap() -> int:
    """Worker count: CPU count, capped by GDSD_LAB_THREADS when set."""
    n = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return n
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {cap}")
    return min(n, cap)


# -- train -----------------------------------------------------------------------------


def run_train(cfg: RunConfig, out: Path) -> int:
    from .trainer import reward_gain, run_training

    tc = cfg.trainer
    metrics: list[dict] = []
    status, error = "completed", None
    t0 = time.perf_counter()
    ckpt = RecordWriter(out / "checkpoints.jsonl") if tc.checkpoint_every > 0 else None
    state = None
    with RecordWriter(out / "metrics.jsonl", METRIC_KEYS) as mw, RecordWriter(out / "timing.jsonl") as tw:
        try:
            for state, rec in run_training(tc):
                mw.write(rec)
                tw.write({"step": rec["step"], "wall_time_s": round(time.perf_counter() - t0, 6)})
                metrics.append(rec)
                if ckpt and state.step % tc.checkpoint_every == 0:
                    ckpt.write({"step": state.step, "params": state.theta.params.tolist()})
                if state.step % 50 == 0:
                    recent = np.mean([m["mean_reward"] for m in metrics[-20:]])
                    log.info("step %d  reward(20) %.3f  loss %.4g", state.step, recent, rec["loss_total"])
        except KeyboardInterrupt:
            status, error = "aborted", "interrupted"
        except Exception as exc:  # noqa: BLE001 - report any failure, keep partial output
            status, error = "aborted", f"{type(exc).__name__}: {exc}"
        finally:
            if ckpt:
                ckpt.close()

    window = min(20, len(metrics)) or 1
    rewards = [m["mean_reward"] for m in metrics]
    summary = {
        "command": "train",
        "status": status,
        "error": error,
        "objective": tc.objective,
        "task": tc.task,
        "seed": tc.seed,
        "steps_requested": tc.steps,
        "steps_completed": len(metrics),
        "old_refreshes": state.refreshes if state is not None else 0,
        "first_window_reward": float(np.mean(rewards[:window])) if metrics else None,
        "last_window_reward": float(np.mean(rewards[-window:])) if metrics else None,
        "reward_gain": reward_gain(metrics, window) if metrics else None,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    write_json(out / "summary.json", summary)
    if metrics:
        _emit_training_plots(cfg, metrics, out)
    if status != "completed":
        log.error("training aborted after %d steps: %s", len(metrics), error)
        return EXIT_ABORTED
    log.info("done: reward %.3f -> %.3f (gain %.3f)", summary["first_window_reward"],
             summary["last_window_reward"], summary["reward_gain"])
    return EXIT_OK


def _emit_training_plots(cfg: RunConfig, metrics: list, out: Path) -> None:
    if cfg.emit_plot_data:
        write_plot_data(metrics, out)
    if cfg.render_plots:
        from .plotting import render_training

        render_training(metrics, out, title=f"{cfg.trainer.objective} on {cfg.trainer.task}")


# -- verify ----------------------------------------------------------------------------


def _selected_checks(cfg: RunConfig) -> list[str]:
    from .verify import ORACLE_CHECKS, TRAINING_CHECKS

    if cfg.verify.checks.strip() == "all":
        names = list(ORACLE_CHECKS)
        if cfg.verify.training:
            names += list(TRAINING_CHECKS)
        return names
    names = [n.strip() for n in cfg.verify.checks.split(",") if n.strip()]
    known = {**ORACLE_CHECKS, **TRAINING_CHECKS}
    bad = [n for n in names if n not in known]
    if bad:
        raise ConfigError(f"verify.checks: unknown check(s) {bad}; known: {sorted(known)}")
    return names


def run_verify(cfg: RunConfig, out: Path) -> int:
    from .verify import run_check

    names = _selected_checks(cfg)
    workers = min(worker_cap(), len(names))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_check, names))
    else:
        results = [run_check(n) for n in names]
    with RecordWriter(out / "verify.jsonl") as w:
        for r in results:
            w.write(r.record())
            flag = "PASS" if r.passed else "FAIL"
            print(f"{flag} {r.name}: {r.statistic:.6g} {r.comparison} {r.threshold:g}  ({r.seconds:.1f}s)")
    failed = [r.name for r in results if not r.passed]
    write_json(out / "summary.json", {"command": "verify", "checks": len(results),
                                      "passed": len(results) - len(failed), "failed": failed})
    return EXIT_FAILED if failed else EXIT_OK


# -- tim -------------------------------------------------------------------------------


def run_tim(cfg: RunConfig, out: Path) -> int:
    from .oracles import tim_fixture, tim_report

    tc = cfg.tim
    inst, sched = tim_fixture(tc.fixture_seed, tc.vocab_size, tc.completion_len, tc.sigma,
                              tc.init_scale, tc.decode_steps or None, tc.selection, tc.temperature)
    rep = tim_report(inst, sched, tc.k, tc.samples, np.random.default_rng(cfg.seed),
                     w=tc.weight, rule=tc.mask_rule)
    with RecordWriter(out / "tim_report.jsonl") as w:
        for row in rep.rows:
            w.write({"record": "completion", **row})
        w.write({"record": "summary", **rep.summary})
    write_json(out / "summary.json", {"command": "tim", **rep.summary})
    if cfg.emit_plot_data:
        keys = ["log_pi_rm", "exact_log_likelihood", "elbo_exact", "elbo_mean", "elbo_std", "ratio_bias"]
        write_csv(out / "tim.csv", ["completion"] + keys,
                  (["".join(map(str, r["completion"]))] + [r[k] for k in keys] for r in rep.rows))
    if cfg.render_plots:
        from .plotting import render_tim

        render_tim(rep.rows, out)
    s = rep.summary
    print(f"completions {s['completions']}  mean |ratio bias| {s['mean_abs_ratio_bias']:.6g}  "
          f"max {s['max_abs_ratio_bias']:.6g}")
    return EXIT_OK


COMMAND_RUNNERS = {"train": run_train, "verify": run_verify, "tim": run_tim}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdsd-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=config_mod.COMMANDS,
                   help="overrides the config's 'command' key")
    p.add_argument("--config", metavar="PATH", help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key (repeatable)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N", help="run seed")
    p.add_argument("--emit-plot-data", action="store_true", help="write CSV files for plotting")
    p.add_argument("--render-plots", action="store_true", help="also render PNG figures with matplotlib")
    p.add_argument("--list-keys", action="store_true", help="print every configuration key and exit")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    return p


def run(config_path=None, overrides=(), *, command=None, out=None, seed=None,
        emit_plot_data=False, render_plots=False) -> int:
    """Resolve the configuration, execute the command, return the exit status."""
    try:
        ov = list(overrides) + ([f"command={command}"] if command else [])
        cfg = config_mod.load(config_path, ov, seed=seed, out=out)
        cfg.emit_plot_data |= emit_plot_data
        cfg.render_plots |= render_plots
        if cfg.command == "verify":
            _selected_checks(cfg)
            worker_cap()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.txt").write_text(config_mod.dump(cfg), encoding="utf-8")
    return COMMAND_RUNNERS[cfg.command](cfg, out_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.list_keys:
        print(config_mod.dump(RunConfig()), end="")
        return EXIT_OK
    return run(args.config, args.overrides, command=args.command, out=args.out, seed=args.seed,
               emit_plot_data=args.emit_plot_data, render_plots=args.render_plots)


if __name__ == "__main__":
    sys.exit(main())
