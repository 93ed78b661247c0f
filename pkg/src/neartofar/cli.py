"""``neartofar`` command line: synth-gen, pretrain, replay, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 check failure. Every
error is reported as a single stderr line ``error[<kind>]: <message>``.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from . import __version__
from .errors import ConfigError, DataError, InvalidInputError, NearToFarError, ParamsLoadError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


def _fail(kind: str, message: str, code: int):
    click.echo(f"error[{kind}]: {' '.join(str(message).split())}", err=True)
    return code


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Near-to-far self-supervised obstacle / free-space segmentation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command("synth-gen")
@click.option("--benchmark", type=click.Choice(["shift", "base"]), help="Built-in scene generator.")
@click.option("--scene", "scene_path", type=click.Path(dir_okay=False), help="Scene description JSON.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", type=int, default=100, show_default=True, help="Frame count for --benchmark base.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def synth_gen(benchmark, scene_path, seed, frames, out_dir):
    """Render a synthetic RGB-D sequence to OUT."""
    from .synth import SceneSpec, export_sequence, make_base_sequence, make_shift_sequence

    if (benchmark is None) == (scene_path is None):
        raise click.UsageError("give exactly one of --benchmark or --scene")
    out = Path(out_dir)
    if not out.parent.exists():
        raise DataError(f"{out.parent}: parent directory of --out does not exist")
    if benchmark == "shift":
        spec = make_shift_sequence(seed)
    elif benchmark == "base":
        spec = make_base_sequence(seed, frames)
    else:
        try:
            spec = SceneSpec.from_dict(json.loads(Path(scene_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{scene_path}: {exc}") from exc
    n = export_sequence(spec, out)
    click.echo(f"frames {n}")
    click.echo(f"digest {spec.digest()}")


@cli.command()
@click.argument("sequences", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--epochs", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True, help="Initialisation / shuffling seed.")
@click.option("--lr", type=float, default=0.05, show_default=True)
@click.option("--momentum", type=float, default=0.9, show_default=True)
@click.option("--batch-frames", type=int, default=4, show_default=True)
@click.option("--test-seed", "test_seeds", type=int, multiple=True,
              help="Scene seed reserved for evaluation; refuses to train on it.")
@click.option("--test-seq", "test_seqs", type=click.Path(file_okay=False), multiple=True,
              help="Evaluation sequence whose scene seed must not be trained on.")
@click.option("--out", "params_path", required=True, type=click.Path(dir_okay=False))
def pretrain(sequences, epochs, seed, lr, momentum, batch_frames, test_seeds, test_seqs, params_path):
    """Offline training of encoder + decoder on SEQUENCES' geometric labels."""
    from .dataset import sequence_seed
    from .network import save_params
    from .pipeline import PretrainConfig
    from .pipeline import pretrain as run_pretrain

    reserved = list(test_seeds) + [sequence_seed(d) for d in test_seqs]
    cfg = PretrainConfig(epochs=epochs, seed=seed, lr=lr, momentum=momentum, batch_frames=batch_frames)
    params, losses, train_seeds = run_pretrain(sequences, cfg, reserved)
    save_params(params, params_path, {"train_seeds": [s for s in train_seeds if s is not None],
                                      "epochs": epochs, "seed": seed, "epoch_losses": losses})
    for i, value in enumerate(losses, 1):
        click.echo(f"epoch {i} loss {value:.6f}")
    click.echo(f"final loss {losses[-1]:.6f}" if losses else "final loss n/a (epochs=0)")
    click.echo(f"params {params_path}")


def _parse_set(values):
    out = {}
    for item in values:
        if "=" not in item:
            raise click.UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


@cli.command("default-config")
def default_config():
    """Print the default replay configuration (JSON)."""
    from .pipeline import default_config_json

    click.echo(default_config_json(), nl=False)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Replay config JSON.")
@click.option("--seq", "sequence", type=click.Path(file_okay=False))
@click.option("--params", type=click.Path(dir_okay=False))
@click.option("--out", "output", type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["online", "frozen"]))
@click.option("--steps-per-frame", type=int)
@click.option("--window", type=int, help="Sliding window size N.")
@click.option("--lr", type=float)
@click.option("--seed", type=int, help="Online sampling seed.")
@click.option("--infer-every-k", type=int)
@click.option("--max-range", type=float)
@click.option("--set", "sets", multiple=True, help="Override any config key: section.key=value")
def replay(config_path, sequence, params, output, mode, steps_per_frame, window, lr, seed, infer_every_k,
           max_range, sets):
    """Replay a recorded sequence through the near-to-far loop."""
    from .pipeline import RunConfig
    from .pipeline import replay as run_replay

    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    overrides = {
        "sequence": sequence, "params": params, "output": output, "mode": mode,
        "online.steps_per_frame": steps_per_frame, "online.window_size": window, "online.lr": lr,
        "online.rng_seed": seed, "online.infer_every_k": infer_every_k, "labeling.max_range": max_range,
    }
    overrides.update(_parse_set(sets))
    cfg = cfg.with_overrides(overrides)
    for key in ("sequence", "params"):
        if not getattr(cfg, key):
            raise click.UsageError(f"missing --{'seq' if key == 'sequence' else key} (or '{key}' in --config)")
    result = run_replay(cfg)
    click.echo(f"frames {result.n_frames} predicted {result.n_predicted} mode {cfg.mode}")
    click.echo(f"params {'unchanged' if result.initial_digest == result.final_digest else 'updated'}")
    if cfg.mode == "frozen" and result.initial_digest != result.final_digest:
        raise CheckFailed("frozen run changed the parameters")
    for region, report in result.reports.items():
        agg = report.aggregate()
        click.echo(f"{region:<4} miou {agg['miou']:.4f} ap {agg['ap']:.4f} accuracy {agg['accuracy']:.4f}")
    click.echo(f"output {cfg.output}")


@cli.command("eval")
@click.argument("pred", type=click.Path(file_okay=False))
@click.option("--gt", "gt_path", required=True, type=click.Path(file_okay=False),
              help="Sequence directory (gt/ + depth/) or a bare label directory.")
@click.option("--region", type=click.Choice(["all", "far"]), default="all", show_default=True)
@click.option("--compare", "other", type=click.Path(file_okay=False), help="Second run / prediction dir.")
@click.option("--max-range", type=float, default=15.0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Directory for CSV output.")
def eval_cmd(pred, gt_path, region, other, max_range, out_dir):
    """Score PRED (a replay run dir or label dir) against ground truth."""
    from .metrics import compare_runs
    from .pipeline import evaluate

    report = evaluate(pred, gt_path, region, max_range)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"metrics_{region}.csv").write_text(report.to_csv())
    agg = report.aggregate()
    click.echo(f"region {region} frames {len(report.frame_ids)}")
    for k, v in agg.items():
        click.echo(f"{k:<14}{v:.4f}")
    if other:
        cmp = compare_runs(report, evaluate(other, gt_path, region, max_range))
        click.echo(cmp.summary(Path(pred).name or "a", Path(other).name or "b"))
        if out:
            (out / f"comparison_{region}.csv").write_text(cmp.to_csv())


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--corrupt", default=None, hidden=True, help="Test hook: perturb this tensor's gradient.")
def gradcheck(seed, corrupt):
    """Finite-difference check of every parameter tensor on an 8x8 instance."""
    from .gradcheck import TOLERANCE, run_gradcheck
    from .network import param_shapes

    if corrupt is not None and corrupt not in param_shapes():
        raise click.UsageError(f"unknown tensor {corrupt!r}")
    report = run_gradcheck(seed, corrupt)
    worst = max(report.values())
    for key, err in report.items():
        click.echo(f"{key:<6} max_rel_err {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    if worst >= TOLERANCE:
        raise CheckFailed(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE}")
    click.echo(f"PASS max_rel_err {worst:.3e}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="neartofar", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return _fail("usage", "aborted", EXIT_USAGE)
    except click.UsageError as exc:
        return _fail("usage", exc.format_message(), EXIT_USAGE)
    except CheckFailed as exc:
        return _fail("check", exc, EXIT_CHECK)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_USAGE)
    except ParamsLoadError as exc:
        return _fail("params", exc, EXIT_DATA)
    except (DataError, InvalidInputError, NearToFarError) as exc:
        return _fail("data", exc, EXIT_DATA)
    except OSError as exc:
        return _fail("io", exc, EXIT_DATA)
    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
