"""`ilora`: batch experiment harness.

Exit codes: 0 ok, 2 configuration error, 3 training divergence,
4 invariant-gate failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .intrinsics import IntrinsicKind

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_GATE = 4


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Recover intrinsic images from toy generative models with LoRA."""


@main.command("forge-data")
@click.option("--n", type=int, required=True, help="number of samples (>= 10)")
@click.option("--resolution", type=int, default=32, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--difficulty", type=click.Choice(["easy", "standard"]), default="standard")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def forge_data(n, resolution, seed, difficulty, out_dir):
    """Render a procedural dataset with exact ground-truth intrinsics."""
    from .dataset import generate_dataset

    try:
        manifest = generate_dataset(n, seed=seed, resolution=resolution, out_dir=out_dir, difficulty=difficulty)
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(json.dumps(manifest.to_dict(), sort_keys=True))


@main.command("pretrain")
@click.option("--family", type=click.Choice(["diffusion", "gan", "vq"]), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--parameterization", type=click.Choice(["epsilon", "v"]), default="epsilon")
@click.option("--checkpoint-steps", default="", help="comma-separated intermediate checkpoint steps")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def pretrain(family, data_dir, steps, seed, parameterization, checkpoint_steps, out_dir):
    """Pretrain one toy generative backbone on renderer RGB images."""
    from .backbones import DivergenceError, make_schedule, pretrain_diffusion, pretrain_gan, pretrain_vq
    from .dataset import Dataset

    dataset = Dataset(data_dir)
    ckpts = tuple(int(s) for s in checkpoint_steps.split(",") if s)
    try:
        if family == "diffusion":
            schedule = make_schedule(100, parameterization)
            result = pretrain_diffusion(dataset, schedule, steps, seed, out_dir, checkpoint_steps=ckpts)
        elif family == "gan":
            result = pretrain_gan(dataset, steps, seed, out_dir, checkpoint_steps=ckpts)
        else:
            result = pretrain_vq(dataset, steps, seed, out_dir)
    except DivergenceError as e:
        _fail(EXIT_DIVERGED, str(e))
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(json.dumps({k: v for k, v in result.items() if k != "losses"}, sort_keys=True))


def _train_config(kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric):
    from .distances import DistanceMetric, TrainConfig

    return TrainConfig(
        kind=IntrinsicKind(kind),
        budget=budget,
        rank=rank,
        selector=selector,
        learning_rate=lr,
        batch_size=batch_size,
        max_steps=max_steps,
        seed=seed,
        metric=DistanceMetric(metric),
    )


_train_options = [
    click.option("--kind", type=click.Choice([k.value for k in IntrinsicKind]), required=True),
    click.option("--budget", type=int, default=250, show_default=True),
    click.option("--rank", type=int, default=8, show_default=True),
    click.option("--selector", default="all_attn", show_default=True),
    click.option("--lr", type=float, default=1e-3, show_default=True),
    click.option("--batch-size", type=int, default=4, show_default=True),
    click.option("--max-steps", type=int, default=2000, show_default=True),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--metric", type=click.Choice(["mse", "cos_plus_l1"]), default="mse"),
]


def _add_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn

    return wrap


@main.command("train-lora")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--multi-step/--single-step", default=False, help="train the augmented multi-step pipeline")
@_add_options(_train_options)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train_lora(checkpoint, data_dir, multi_step, kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric, out_dir):
    """Train LoRA adapters on a pretrained backbone (dense single-step path,
    or the channel-extended multi-step path with --multi-step)."""
    from .backbones import load_checkpoint, make_schedule
    from .dataset import Dataset
    from .experiments import train_and_eval_lora_dense
    from .lora import LoraError, inject, save_adapters
    from .runs import RunDirError, create_run_dir
    from .sampler import extend_input_channels, train_lora_multistep, zero_snr_rescale

    dataset = Dataset(data_dir)
    cfg = _train_config(kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric)
    try:
        out = create_run_dir(out_dir, {"command": "train-lora", "multi_step": multi_step, **cfg.to_dict()})
        if multi_step:
            backbone = load_checkpoint(checkpoint)
            extend_input_channels(backbone)
            schedule = zero_snr_rescale(make_schedule(100, "v"))
            adapters = inject(backbone, cfg.selector, cfg.rank, cfg.seed, cfg.kind)
            adapters, log = train_lora_multistep(backbone, adapters, dataset, cfg, schedule)
            save_adapters(adapters, out / "adapters.ilra")
            log.write(out / "log.jsonl")
            click.echo(json.dumps({"final_loss": log.final_loss, "out": str(out)}))
        else:
            _, _, log, report = train_and_eval_lora_dense(checkpoint, dataset, cfg, out_dir=out)
            click.echo(json.dumps({"final_loss": log.final_loss, **report.to_dict()}, sort_keys=True))
    except (LoraError, ValueError, RunDirError) as e:
        _fail(EXIT_CONFIG, str(e))
    except RuntimeError as e:
        _fail(EXIT_DIVERGED, str(e))


@main.command("train-baseline")
@click.option("--method", type=click.Choice(["linear_probe", "full_finetune"]), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@_add_options(_train_options)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def train_baseline(method, checkpoint, data_dir, kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric, out_dir):
    """Train a comparison baseline (linear probe or full fine-tune)."""
    from .backbones import load_checkpoint
    from .dataset import Dataset
    from .experiments import evaluate_predictions
    from .runs import RunDirError, create_run_dir
    from .sampler import single_step_predict
    from .training import full_finetune, probe_predict, train_linear_probe
    import torch

    dataset = Dataset(data_dir)
    cfg = _train_config(kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric)
    codec = dataset.manifest.codec_params
    try:
        out = create_run_dir(out_dir, {"command": "train-baseline", "method": method, **cfg.to_dict()})
        backbone = load_checkpoint(checkpoint)
        if method == "linear_probe":
            head, log = train_linear_probe(backbone, dataset, cfg)

            def predict(img):
                x = torch.from_numpy(img.data).permute(2, 0, 1)[None]
                enc = probe_predict(backbone, head, x, cfg.kind)[0].permute(1, 2, 0).numpy()
                from .intrinsics import EncodedTarget, decode_intrinsic
                import numpy as np

                return decode_intrinsic(EncodedTarget(cfg.kind, np.clip(enc, -1, 1), codec))

        else:
            tuned, log = full_finetune(backbone, dataset, cfg)

            def predict(img):
                return single_step_predict(tuned, None, img, cfg.kind, codec)

        report = evaluate_predictions(predict, dataset, cfg.kind, "val")
        log.write(out / "log.jsonl")
        report.write(out / "metrics.json")
        (out / "resources.json").write_text(
            json.dumps({"steps_per_sec": log.steps_per_sec(), "peak_mem_bytes": log.records[-1]["peak_mem_bytes"]})
        )
        click.echo(json.dumps(report.to_dict(), sort_keys=True))
    except (ValueError, RunDirError) as e:
        _fail(EXIT_CONFIG, str(e))
    except RuntimeError as e:
        _fail(EXIT_DIVERGED, str(e))


@main.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--adapters", "adapters_path", type=click.Path(exists=True))
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--kind", type=click.Choice([k.value for k in IntrinsicKind]), required=True)
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="val")
@click.option("--multi-step/--single-step", default=False)
@click.option("--steps", type=int, default=10, show_default=True)
@click.option("--cfg-scale", type=float, default=3.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--no-condition", is_flag=True, help="ablation: zero the conditioning channels")
@click.option("--out", "out_dir", type=click.Path(), required=True)
def evaluate(checkpoint, adapters_path, data_dir, kind, split, multi_step, steps, cfg_scale, seed, no_condition, out_dir):
    """Evaluate a trained model on a dataset split and write metrics.json."""
    from .backbones import load_checkpoint, make_schedule
    from .dataset import Dataset
    from .experiments import evaluate_predictions
    from .lora import LoraError, load_adapters
    from .sampler import CfgParams, multi_step_sample, single_step_predict, zero_snr_rescale

    dataset = Dataset(data_dir)
    codec = dataset.manifest.codec_params
    k = IntrinsicKind(kind)
    try:
        backbone = load_checkpoint(checkpoint)
        adapters = None
        if adapters_path:
            adapters = load_adapters(adapters_path, backbone)
        if multi_step:
            schedule = zero_snr_rescale(make_schedule(100, "v"))
            params = CfgParams(scale=cfg_scale, steps=steps)

            def predict(img):
                return multi_step_sample(backbone, img, k, params, seed, codec, schedule, no_condition=no_condition)

        else:

            def predict(img):
                return single_step_predict(backbone, adapters, img, k, codec)

        report = evaluate_predictions(predict, dataset, k, split)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "metrics.json")
        click.echo(json.dumps(report.to_dict(), sort_keys=True))
    except (LoraError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))


@main.command("ablate")
@click.option("--axis", type=click.Choice(["rank", "budget", "selector", "steps", "cfg_scale"]), required=True)
@click.option("--values", required=True, help="comma-separated values within the documented domain")
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@_add_options(_train_options)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def ablate_cmd(axis, values, checkpoint, data_dir, kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric, out_dir):
    """Sweep one hyperparameter axis; divergent cells are recorded as DNF."""
    from .backbones import make_schedule
    from .dataset import Dataset
    from .experiments import ablate
    from .sampler import zero_snr_rescale

    dataset = Dataset(data_dir)
    cfg = _train_config(kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric)
    vals = [v if axis == "selector" else int(v) for v in values.split(",")]
    schedule = zero_snr_rescale(make_schedule(100, "v")) if axis in ("steps", "cfg_scale") else None
    try:
        rows = ablate(axis, vals, checkpoint, dataset, cfg, out_dir, schedule=schedule)
    except ValueError as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(json.dumps(rows, default=str))


@main.command("correlate")
@click.option("--checkpoints", required=True, help="comma-separated steps:path pairs, >= 3")
@click.option("--control", "control_path", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@_add_options(_train_options)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def correlate(checkpoints, control_path, data_dir, kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric, out_dir):
    """Generation-quality proxy vs post-LoRA recovery error across checkpoints."""
    from .backbones import make_schedule
    from .dataset import Dataset
    from .metrics import MetricError, correlation_experiment

    dataset = Dataset(data_dir)
    cfg = _train_config(kind, budget, rank, selector, lr, batch_size, max_steps, seed, metric)
    pairs = []
    try:
        for item in checkpoints.split(","):
            steps, path = item.split(":", 1)
            pairs.append((int(steps), path))
        report = correlation_experiment(
            pairs, dataset, cfg.kind, cfg, make_schedule(100, "epsilon"), control_path
        )
    except (MetricError, ValueError) as e:
        _fail(EXIT_CONFIG, str(e))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "correlation.csv")
    click.echo(json.dumps({"spearman": report.spearman_proxy_error, "rows": len(report.rows)}))


@main.command("report")
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True))
@click.option("--out", "out_dir", type=click.Path(), required=True)
def report_cmd(run_dirs, out_dir):
    """Aggregate metrics.json files from run directories into a summary."""
    from .experiments import write_report

    if not run_dirs:
        _fail(EXIT_CONFIG, "report needs at least one run directory")
    try:
        by_kind = write_report(list(run_dirs), out_dir)
    except (ValueError, RuntimeError) as e:
        _fail(EXIT_CONFIG, str(e))
    click.echo(json.dumps({k: len(v) for k, v in sorted(by_kind.items())}))


@main.command("end-to-end")
@click.option("--preset", type=click.Choice(["quick", "findings"]), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def end_to_end(preset, seed, out_dir):
    """One-command reproduction of the toy findings suite."""
    from .experiments import run_findings_preset, run_quick_preset

    try:
        if preset == "quick":
            summary = run_quick_preset(out_dir, seed=seed)
        else:
            summary = run_findings_preset(out_dir, seed=seed)
    except RuntimeError as e:
        _fail(EXIT_DIVERGED, str(e))
    click.echo(json.dumps(summary, sort_keys=True, indent=1))
    if not summary["ok"]:
        sys.exit(EXIT_GATE)


if __name__ == "__main__":
    main()
