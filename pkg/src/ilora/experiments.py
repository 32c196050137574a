"""Experiment orchestration shared by the CLI: evaluation helpers, constant
baselines, ablation sweeps, presets, and reporting."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .backbones import load_checkpoint, make_schedule, pretrain_diffusion
from .dataset import Dataset, generate_dataset
from .distances import DistanceMetric, TrainConfig
from .intrinsics import CodecParams, Image, IntrinsicKind, IntrinsicMap
from .lora import inject, param_fraction, save_adapters
from .metrics import MetricsReport, config_hash, correlation_experiment, evaluate_maps
from .sampler import (
    CfgParams,
    extend_input_channels,
    multi_step_sample,
    single_step_predict,
    train_lora_multistep,
    zero_snr_rescale,
)
from .training import full_finetune, probe_predict, train_linear_probe, train_lora_dense
from .viz import intrinsic_to_rgb8, model_space_to_rgb8, save_grid

RANK_DOMAIN = (2, 4, 8, 16, 32)
BUDGET_DOMAIN = (250, 1000, 4000, 16000)
STEPS_DOMAIN = (2, 5, 10, 15, 20, 25, 50)
CFG_DOMAIN = (1, 3, 5, 7, 9, 11, 13)

# published rank ablation errors, echoed in ablation report footers as the
# comparison target for the toy-scale trend
REFERENCE_RANK_ERRORS = {2: 22.28, 4: 22.57, 8: 20.31, 16: 21.17, 32: 21.84}


def dataset_hash(dataset: Dataset) -> str:
    return config_hash(dataset.manifest.to_dict())


def evaluate_predictions(
    predict_fn,
    dataset: Dataset,
    kind: IntrinsicKind,
    split: str = "val",
    provenance: dict | None = None,
    limit: int | None = None,
) -> MetricsReport:
    """Run predict_fn(Image) -> IntrinsicMap over a split and pool the metrics."""
    idx = dataset.split_indices(split)
    if limit is not None:
        idx = idx[:limit]
    preds, gts = [], []
    for i in idx:
        preds.append(predict_fn(Image(data=dataset.load_rgb(i))))
        gts.append(dataset.load_intrinsic(i, kind))
    return evaluate_maps(preds, gts, kind, provenance=provenance)


def constant_baseline(dataset: Dataset, kind: IntrinsicKind, split: str = "val") -> MetricsReport:
    """Strongest constant prediction of the right shape: up-normal for normals,
    train-split median for depth, train-split mean for albedo/shading."""
    res = dataset.manifest.resolution
    if kind is IntrinsicKind.NORMAL:
        const = np.tile(np.array([0.0, 0.0, 1.0], dtype=np.float32), (res, res, 1))
    else:
        train_vals = np.concatenate(
            [dataset.load_intrinsic(i, kind).data.ravel() for i in dataset.split_indices("train")[:200]]
        )
        value = np.median(train_vals) if kind is IntrinsicKind.DEPTH else train_vals.mean()
        const = np.full((res, res, kind.channels), value, dtype=np.float32)
    pred = IntrinsicMap(kind, const)
    return evaluate_predictions(lambda img: pred, dataset, kind, split)


def primary_error(report: MetricsReport) -> float:
    """The headline scalar per kind (mean angular error or RMS)."""
    if report.kind is IntrinsicKind.NORMAL:
        return report.mean_deg
    return report.rms


def train_and_eval_lora_dense(
    checkpoint: str | Path,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    split: str = "val",
):
    """Inject, train, evaluate; optionally persist adapters/log/metrics."""
    backbone = load_checkpoint(checkpoint)
    adapters = inject(backbone, cfg.selector, cfg.rank, cfg.seed, cfg.kind)
    adapters, log = train_lora_dense(backbone, adapters, dataset, cfg)
    codec = dataset.manifest.codec_params
    provenance = {
        "config_hash": config_hash(cfg.to_dict()),
        "adapters_hash": config_hash(adapters.state_bytes().hex()),
        "dataset_hash": dataset_hash(dataset),
        "checkpoint": str(checkpoint),
    }
    report = evaluate_predictions(
        lambda img: single_step_predict(backbone, adapters, img, cfg.kind, codec),
        dataset,
        cfg.kind,
        split,
        provenance,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_adapters(adapters, out / "adapters.ilra")
        log.write(out / "log.jsonl")
        report.write(out / "metrics.json")
    return backbone, adapters, log, report


def ablate(
    axis: str,
    values: list,
    checkpoint: str | Path,
    dataset: Dataset,
    base_cfg: TrainConfig,
    out_dir: str | Path,
    schedule=None,
) -> list[dict]:
    """Sweep one axis with a shared seed; non-converged cells become DNF rows
    instead of killing the sweep. Writes ablation.csv and a prediction grid."""
    domains = {
        "rank": RANK_DOMAIN,
        "budget": BUDGET_DOMAIN,
        "selector": ("all_attn", "cross_only", "self_only", "up_blocks", "mid_block", "down_blocks"),
        "steps": STEPS_DOMAIN,
        "cfg_scale": CFG_DOMAIN,
    }
    if axis not in domains:
        raise ValueError(f"unknown ablation axis {axis!r}")
    for v in values:
        if v not in domains[axis]:
            raise ValueError(f"value {v!r} outside the {axis} domain {domains[axis]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    grid_tiles = []
    codec = dataset.manifest.codec_params
    for v in values:
        cfg = TrainConfig(**{**base_cfg.__dict__})
        if axis in ("rank", "budget", "selector"):
            setattr(cfg, axis, v)
        row = {"axis": axis, "value": v, "status": "ok"}
        try:
            if axis in ("steps", "cfg_scale"):
                report, sample_vis = _ablate_multistep_cell(
                    axis, v, checkpoint, dataset, cfg, schedule
                )
            else:
                backbone, adapters, log, report = train_and_eval_lora_dense(
                    checkpoint, dataset, cfg
                )
                baseline = constant_baseline(dataset, cfg.kind)
                if not np.isfinite(log.final_loss) or primary_error(report) > 2.0 * primary_error(baseline):
                    row["status"] = "DNF"
                row["param_fraction"] = param_fraction(adapters, backbone)
                i0 = dataset.split_indices("val")[0]
                pred = single_step_predict(
                    backbone, adapters, Image(data=dataset.load_rgb(i0)), cfg.kind, codec
                )
                sample_vis = intrinsic_to_rgb8(pred, codec)
            row["mean_deg"] = report.mean_deg
            row["rms"] = report.rms
            row["delta_125"] = report.delta_125
            grid_tiles.append(sample_vis)
        except RuntimeError as e:
            row["status"] = "DNF"
            row["error"] = str(e)
        rows.append(row)

    fields = ["axis", "value", "status", "mean_deg", "rms", "delta_125", "param_fraction", "error"]
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in fields})
    footer = {"reference_rank_errors": REFERENCE_RANK_ERRORS} if axis == "rank" else {}
    (out / "ablation_footer.json").write_text(json.dumps(footer, sort_keys=True))
    if grid_tiles:
        i0 = dataset.split_indices("val")[0]
        gt_vis = intrinsic_to_rgb8(dataset.load_intrinsic(i0, base_cfg.kind), codec)
        rgb_vis = model_space_to_rgb8(dataset.load_rgb(i0))
        save_grid([[rgb_vis, gt_vis] + grid_tiles], out / "ablation_grid.png")
    return rows


def _ablate_multistep_cell(axis, value, checkpoint, dataset, cfg, schedule):
    if schedule is None:
        raise ValueError(f"{axis} ablation needs a trained multi-step setup (schedule)")
    backbone = load_checkpoint(checkpoint)
    if backbone.conv_cond is None:
        extend_input_channels(backbone)
    adapters = inject(backbone, cfg.selector, cfg.rank, cfg.seed, cfg.kind)
    train_lora_multistep(backbone, adapters, dataset, cfg, schedule)
    codec = dataset.manifest.codec_params
    params = CfgParams(
        scale=float(value) if axis == "cfg_scale" else 3.0,
        steps=int(value) if axis == "steps" else 10,
    )
    report = evaluate_predictions(
        lambda img: multi_step_sample(backbone, img, cfg.kind, params, cfg.seed, codec, schedule),
        dataset,
        cfg.kind,
        "val",
        limit=16,
    )
    i0 = dataset.split_indices("val")[0]
    pred = multi_step_sample(
        backbone, Image(data=dataset.load_rgb(i0)), cfg.kind, params, cfg.seed, codec, schedule
    )
    return report, intrinsic_to_rgb8(pred, codec)


def write_report(run_dirs: list[str | Path], out_dir: str | Path) -> dict:
    """Aggregate metrics.json files into a summary (text + CSV), grouped by kind."""
    from .runs import read_metrics

    if not run_dirs:
        raise ValueError("report needs at least one run directory")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_kind: dict[str, list[dict]] = {}
    for rd in run_dirs:
        m = read_metrics(rd)
        m["run_dir"] = str(rd)
        by_kind.setdefault(m["kind"], []).append(m)
    for rows in by_kind.values():
        rows.sort(key=lambda m: m["run_dir"])

    fields = ["run_dir", "kind", "mean_deg", "median_deg", "l1_x100", "rms", "delta_125", "n_pixels"]
    lines = []
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for kind in sorted(by_kind):
            for m in by_kind[kind]:
                w.writerow({k: m.get(k) for k in fields})
                lines.append(
                    "  ".join(str(m.get(k)) for k in fields)
                )
    (out / "summary.txt").write_text("\n".join(["  ".join(fields)] + lines) + "\n")
    return by_kind


def _quick_train_config(kind: IntrinsicKind, seed: int, **overrides) -> TrainConfig:
    """Shared recipe for the preset LoRA cells: the angular loss is what makes
    normals competitive (an MSE fit wastes capacity on ground pixels where the
    constant baseline is already exact)."""
    metric = DistanceMetric.COS_PLUS_L1 if kind is IntrinsicKind.NORMAL else DistanceMetric.MSE
    # the higher rank buys object-pixel accuracy for normals; depth mostly
    # needs the extra learning rate to resolve near-field pixels, where the
    # affine depth encoding has the least relative precision
    base = dict(
        kind=kind,
        budget=500,
        rank=16 if kind is IntrinsicKind.DEPTH else 32,
        learning_rate=2e-3,
        batch_size=16,
        max_steps=1000,
        seed=seed,
        metric=metric,
    )
    base.update(overrides)
    return TrainConfig(**base)


def run_quick_preset(out_root: str | Path, seed: int = 0, resolution: int = 32) -> dict:
    """Forge the small dataset, pretrain the diffusion backbone 2k steps, train
    single-step LoRA 1k steps for normals and depth, and gate against the
    constant baselines. Sized for well under 20 minutes on a few CPU cores."""
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        # 625 samples put exactly 500 in the 80% train split, the minimum the
        # diffusion pretrainer accepts
        generate_dataset(625, seed=seed, resolution=resolution, out_dir=data_dir)
    dataset = Dataset(data_dir)
    schedule = make_schedule(100, "epsilon")
    pre = pretrain_diffusion(
        dataset, schedule, steps=2000, seed=seed, out_dir=out / "pretrain"
    )

    summary = {"preset": "quick", "seed": seed, "gates": {}}
    for kind in (IntrinsicKind.NORMAL, IntrinsicKind.DEPTH):
        cfg = _quick_train_config(kind, seed)
        _, _, log, report = train_and_eval_lora_dense(
            pre["final"], dataset, cfg, out_dir=out / f"lora_{kind.value}"
        )
        base = constant_baseline(dataset, kind)
        if kind is IntrinsicKind.NORMAL:
            gate = report.mean_deg <= 0.6 * base.mean_deg
            summary["gates"]["normals_vs_constant"] = {
                "lora_mean_deg": report.mean_deg,
                "constant_mean_deg": base.mean_deg,
                "pass": bool(gate),
            }
        else:
            gate = report.delta_125 >= 2.0 * base.delta_125
            summary["gates"]["depth_vs_constant"] = {
                "lora_delta_125": report.delta_125,
                "constant_delta_125": base.delta_125,
                "pass": bool(gate),
            }
    summary["ok"] = all(g["pass"] for g in summary["gates"].values())
    (out / "quick_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary


def run_findings_preset(out_root: str | Path, seed: int = 0, resolution: int = 32) -> dict:
    """The full toy suite: budget and rank orderings, the generation-quality
    correlation with a random-init control, the linear-probe and full-fine-tune
    baselines with resource accounting, LoRA on the GAN and VQ families, and
    the multi-step conditioned sampler checks."""
    from .backbones import UNetBackbone, pretrain_gan, pretrain_vq, save_checkpoint
    from .intrinsics import EncodedTarget, decode_intrinsic
    from .oracle import train_oracle_predictor
    from .training import train_lora_generative

    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        # 5100 samples leave 4080 in train, enough for the largest budget cell
        generate_dataset(5100, seed=seed, resolution=resolution, out_dir=data_dir)
    dataset = Dataset(data_dir)
    codec = dataset.manifest.codec_params
    kind = IntrinsicKind.NORMAL
    base = constant_baseline(dataset, kind)
    const_err = primary_error(base)

    schedule = make_schedule(100, "epsilon")
    pre = pretrain_diffusion(
        dataset,
        schedule,
        steps=2500,
        seed=seed,
        out_dir=out / "pretrain",
        checkpoint_steps=(150, 600),
    )
    final_ckpt = pre["final"]
    summary = {"preset": "findings", "seed": seed, "gates": {}}

    # budget ordering and low-rank viability (shared seed across cells)
    cells = {}
    for label, overrides in (
        ("budget_250", dict(budget=250)),
        ("budget_4000", dict(budget=4000)),
        ("rank_2", dict(budget=250, rank=2)),
    ):
        cfg = _quick_train_config(kind, seed, **overrides)
        _, _, log, report = train_and_eval_lora_dense(
            final_ckpt, dataset, cfg, out_dir=out / label
        )
        cells[label] = {"error": primary_error(report), "steps_per_sec": log.steps_per_sec()}
    summary["gates"]["budget_ordering"] = {
        "error_250": cells["budget_250"]["error"],
        "error_4000": cells["budget_4000"]["error"],
        "pass": bool(cells["budget_250"]["error"] > cells["budget_4000"]["error"]),
    }
    summary["gates"]["rank2_beats_constant"] = {
        "rank2_error": cells["rank_2"]["error"],
        "constant_error": const_err,
        "pass": bool(cells["rank_2"]["error"] < const_err),
    }

    # adaptation baselines at budget 250 with the same seed and recipe
    probe_cfg = _quick_train_config(kind, seed, budget=250)
    backbone = load_checkpoint(final_ckpt)
    head, probe_log = train_linear_probe(backbone, dataset, probe_cfg)

    def probe_fn(img):
        x = torch.from_numpy(img.data).permute(2, 0, 1)[None]
        enc = probe_predict(backbone, head, x, kind)[0].permute(1, 2, 0).numpy()
        return decode_intrinsic(EncodedTarget(kind, np.clip(enc, -1, 1), codec))

    probe_err = primary_error(evaluate_predictions(probe_fn, dataset, kind))

    ft_backbone, ft_log = full_finetune(load_checkpoint(final_ckpt), dataset, probe_cfg)
    ft_err = primary_error(
        evaluate_predictions(
            lambda img: single_step_predict(ft_backbone, None, img, kind, codec),
            dataset,
            kind,
        )
    )
    lora_err = cells["budget_250"]["error"]
    rates = {
        "lora": cells["budget_250"]["steps_per_sec"],
        "linear_probe": probe_log.steps_per_sec(),
        "full_finetune": ft_log.steps_per_sec(),
    }
    (out / "resources.json").write_text(json.dumps({"steps_per_sec": rates}, sort_keys=True, indent=1))
    summary["gates"]["baseline_ordering"] = {
        "lora_error": lora_err,
        "probe_error": probe_err,
        "full_finetune_error": ft_err,
        "steps_per_sec": rates,
        "pass": bool(
            lora_err <= probe_err
            and lora_err <= ft_err
            and rates["full_finetune"] < min(rates["lora"], rates["linear_probe"])
        ),
    }

    # generation quality vs recovery error across checkpoints plus a
    # random-init control, all under one LoRA recipe
    control_path = out / "control.ilck"
    save_checkpoint(
        UNetBackbone(resolution=resolution, init_seed=seed + 1000), control_path
    )
    # albedo with a short adaptation (150 steps) separates the checkpoints
    # most cleanly: the pretrained models steer their existing features onto
    # the task before the control can learn it from scratch
    corr_kind = IntrinsicKind.ALBEDO
    corr_cfg = _quick_train_config(corr_kind, seed, budget=250, max_steps=150)
    corr = correlation_experiment(
        [(s, p) for s, p in pre["checkpoints"].items()],
        dataset,
        corr_kind,
        corr_cfg,
        schedule,
        str(control_path),
    )
    corr.write_csv(out / "correlation.csv")
    best_err = min(r["mean_deg"] for r in corr.rows if not r["is_control"])
    control_err = next(r["mean_deg"] for r in corr.rows if r["is_control"])
    summary["gates"]["quality_correlation"] = {
        "spearman": corr.spearman_proxy_error,
        "best_checkpoint_error": best_err,
        "control_error": control_err,
        "pass": bool(corr.spearman_proxy_error > 0 and control_err >= 1.2 * best_err),
    }

    # the GAN and VQ families, labelled by the oracle predictor
    oracle, _ = train_oracle_predictor(dataset, kind, steps=1500, seed=seed)
    gan = pretrain_gan(dataset, steps=1200, seed=seed, out_dir=out / "gan")
    vq = pretrain_vq(dataset, steps=1200, seed=seed, out_dir=out / "vq")
    gen_gates = {}
    for family, ckpt, selector, extra in (
        ("gan", gan["last_good"], "gan_affine", {}),
        ("vq", vq["final"], "vq_decoder_attn", {"dataset": dataset}),
    ):
        gen_backbone = load_checkpoint(ckpt)
        gen_cfg = _quick_train_config(kind, seed, budget=250, max_steps=600)
        adapters = inject(gen_backbone, selector, gen_cfg.rank, seed, kind)
        adapters, gen_log = train_lora_generative(gen_backbone, adapters, oracle, gen_cfg, **extra)
        first = gen_log.records[0]["loss"]
        gen_gates[family] = {
            "first_loss": first,
            "final_loss": gen_log.final_loss,
            "pass": bool(np.isfinite(gen_log.final_loss) and gen_log.final_loss < first),
        }
    summary["gates"]["generative_families"] = {
        **gen_gates,
        "pass": all(g["pass"] for g in gen_gates.values()),
    }

    # multi-step conditioned sampling: zero-SNR v schedule, condition channels,
    # guidance; condition must help and 10 steps must track 25
    v_sched = zero_snr_rescale(make_schedule(100, "v"))
    ms_backbone = UNetBackbone(resolution=resolution, init_seed=seed)
    ms_pre = pretrain_diffusion(
        dataset, v_sched, steps=2000, seed=seed, out_dir=out / "pretrain_v"
    )
    ms_backbone = load_checkpoint(ms_pre["final"])
    extend_input_channels(ms_backbone)
    ms_cfg = _quick_train_config(kind, seed, max_steps=1500)
    ms_adapters = inject(ms_backbone, "all_attn", ms_cfg.rank, seed, kind)
    train_lora_multistep(ms_backbone, ms_adapters, dataset, ms_cfg, v_sched)

    def ms_eval(steps: int, no_condition: bool) -> float:
        params = CfgParams(scale=3.0, steps=steps)
        return primary_error(
            evaluate_predictions(
                lambda img: multi_step_sample(
                    ms_backbone, img, kind, params, seed, codec, v_sched, no_condition=no_condition
                ),
                dataset,
                kind,
                limit=16,
            )
        )

    err_cond = ms_eval(10, False)
    err_nocond = ms_eval(10, True)
    err_25 = ms_eval(25, False)
    summary["gates"]["multistep"] = {
        "terminal_alpha_bar": float(v_sched.alpha_bar[-1]),
        "error_conditioned": err_cond,
        "error_no_condition": err_nocond,
        "error_steps_25": err_25,
        "pass": bool(
            v_sched.alpha_bar[-1] == 0.0
            and err_cond < err_nocond
            and err_cond <= 1.1 * err_25
        ),
    }

    summary["ok"] = all(g["pass"] for g in summary["gates"].values())
    (out / "findings_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1))
    return summary
