"""Stage orchestration: one function per CLI verb, plus completion records.

Every stage writes its artifacts under ``<output_root>/<stage>/`` together
with the exact config used and a completion record carrying a scoped config
hash; downstream stages refuse to run against stale or missing upstream
artifacts and name the command that must run first.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np
import torch

from . import calibration as cal
from .config import ExperimentConfig, config_hash, save_config
from .diffusion import make_schedule, strided_schedule
from .distill import benchmark_forward_models, freeze, train_ddn
from .errors import ConfigurationError, MissingArtifactError
from .generator import train_generator
from .metrics import compare_images, write_sweep_csv
from .networks import (
    ConvAutoencoder,
    PixelCodec,
    load_checkpoint,
    numpy_denoiser,
    save_checkpoint,
    train_autoencoder,
)
from .pairs import build_dataset, load_pairs, verify_manifest
from .restorer import restore_image, train_phase1, train_phase2
from .storage import file_sha256
from .synthdata import build_oracle_dataset, load_clean_dir, load_split
from .trainutil import derive_seed

STAGE_COMMANDS = {
    "dataset": "simulate",
    "veilgen": "train-veilgen",
    "pairs": "generate-pairs",
    "ddn": "distill",
    "deveiler": "train-deveiler",
}

# cumulative config sections whose change invalidates a stage
_STAGE_SECTIONS = {
    "dataset": ("image", "simulate"),
    "veilgen": ("image", "simulate", "schedule", "generator"),
    "pairs": ("image", "simulate", "schedule", "generator", "pairs"),
    "ddn": ("image", "simulate", "schedule", "generator", "pairs", "distill"),
    "deveiler": ("image", "simulate", "schedule", "generator", "pairs", "distill", "restorer"),
}


def scoped_hash(cfg: ExperimentConfig, stage: str) -> str:
    data = {"seed": cfg.seed, "latent_space": cfg.latent_space}
    full = cfg.to_dict()
    for section in _STAGE_SECTIONS[stage]:
        data[section] = full[section]
    blob = json.dumps(data, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


class Paths:
    def __init__(self, root):
        self.root = str(root)

    def stage(self, name) -> str:
        return os.path.join(self.root, name)

    def record(self, name) -> str:
        return os.path.join(self.stage(name), "stage.json")


def _begin_stage(cfg: ExperimentConfig, paths: Paths, name: str) -> str:
    stage_dir = paths.stage(name)
    os.makedirs(stage_dir, exist_ok=True)
    save_config(cfg, os.path.join(stage_dir, "config.json"))
    return stage_dir


def _finish_stage(cfg, paths, name, artifacts, extra=None) -> None:
    stage_dir = paths.stage(name)
    record = {
        "stage": name,
        "config_hash": scoped_hash(cfg, name),
        "full_config_hash": config_hash(cfg),
        "artifacts": {
            os.path.relpath(p, stage_dir): file_sha256(p) for p in artifacts
        },
    }
    record.update(extra or {})
    with open(paths.record(name), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def require_stage(cfg: ExperimentConfig, paths: Paths, name: str) -> dict:
    command = STAGE_COMMANDS[name]
    record_path = paths.record(name)
    if not os.path.exists(record_path):
        raise MissingArtifactError(
            f"stage {name!r} has not produced artifacts under {paths.stage(name)}; "
            f"run `veilsim {command}` first",
            required_command=command,
        )
    with open(record_path) as f:
        record = json.load(f)
    if record.get("config_hash") != scoped_hash(cfg, name):
        raise ConfigurationError(
            f"config changed since stage {name!r} ran; re-run `veilsim {command}`"
        )
    for rel in record.get("artifacts", {}):
        if not os.path.exists(os.path.join(paths.stage(name), rel)):
            raise MissingArtifactError(
                f"stage {name!r} artifact {rel} is missing; re-run `veilsim {command}`",
                required_command=command,
            )
    return record


def build_schedule(cfg: ExperimentConfig):
    return make_schedule(cfg.schedule.T_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)


def get_codec(cfg: ExperimentConfig, paths: Paths | None = None, for_training=None):
    """The latent codec: pixel-space by default, optional learned 4x one.

    When ``for_training`` images are given and the conv codec is configured,
    a fresh autoencoder is fitted briefly and stored with the generator;
    otherwise it is loaded from the generator stage.
    """
    if cfg.latent_space == "identity":
        return PixelCodec(channels=cfg.image.channels)
    ckpt = os.path.join(paths.stage("veilgen"), "codec.ckpt") if paths else None
    if for_training is not None:
        seed = derive_seed(cfg.seed, "codec")
        torch.manual_seed(seed)
        ae = ConvAutoencoder(channels=cfg.image.channels)
        train_autoencoder(ae, for_training, iters=400, lr=1e-3, seed=seed)
        ae.eval()
        if ckpt:
            save_checkpoint(ckpt, ae, {"seed": seed})
        return ae
    if not ckpt or not os.path.exists(ckpt):
        raise MissingArtifactError(
            "conv4x codec checkpoint missing; run `veilsim train-veilgen` first",
            required_command="train-veilgen",
        )
    ae = load_checkpoint(ckpt)
    ae.eval()
    return ae


def cmd_simulate(cfg: ExperimentConfig, paths: Paths | None = None) -> str:
    paths = paths or Paths(cfg.output_root)
    out = _begin_stage(cfg, paths, "dataset")
    clean_images = None
    if cfg.simulate.clean_dir:
        clean_images = load_clean_dir(cfg.simulate.clean_dir, cfg.image.size, cfg.image.channels)
    manifest = build_oracle_dataset(
        out,
        seed=derive_seed(cfg.seed, "simulate"),
        image_size=cfg.image.size,
        channels=cfg.image.channels,
        grid_rows=cfg.simulate.grid_rows,
        grid_cols=cfg.simulate.grid_cols,
        kernel_size=cfg.simulate.kernel_size,
        severity=cfg.simulate.severity,
        glare_strength=cfg.simulate.glare_strength,
        map_downscale=cfg.simulate.map_downscale,
        counts={
            "source_train": cfg.simulate.n_source_train,
            "source_test": cfg.simulate.n_source_test,
            "target_train": cfg.simulate.n_target_train,
            "target_test": cfg.simulate.n_target_test,
        },
        clean_images=clean_images,
    )
    _finish_stage(cfg, paths, "dataset", [manifest, os.path.join(out, "optics.bin")])
    return out


def cmd_train_veilgen(
    cfg: ExperimentConfig,
    paths: Paths | None = None,
    dataset_dir: str | None = None,
    n_target: int | None = None,
) -> str:
    paths = paths or Paths(cfg.output_root)
    if dataset_dir is None:
        require_stage(cfg, paths, "dataset")
        dataset_dir = paths.stage("dataset")
    out = _begin_stage(cfg, paths, "veilgen")

    source = load_split(dataset_dir, "source_train")
    target = load_split(dataset_dir, "target_train", limit=n_target)
    if not target["degraded"]:
        raise ConfigurationError("target corpus is empty; nothing to adapt to")
    source_pairs = list(zip(source["clean"], source["degraded"]))
    codec = get_codec(cfg, paths, for_training=source["clean"] + target["degraded"])
    sched = build_schedule(cfg)
    train_generator(
        source_pairs,
        target["degraded"],
        codec,
        sched,
        cfg.generator,
        out,
        seed=derive_seed(cfg.seed, "veilgen"),
    )
    artifacts = [os.path.join(out, "denoiser.ckpt"), os.path.join(out, "lotgmp.ckpt")]
    _finish_stage(cfg, paths, "veilgen", artifacts, {"n_target": n_target})
    return out


def cmd_generate_pairs(
    cfg: ExperimentConfig,
    paths: Paths | None = None,
    dataset_dir: str | None = None,
    n_target: int | None = None,
) -> str:
    paths = paths or Paths(cfg.output_root)
    if dataset_dir is None:
        require_stage(cfg, paths, "dataset")
        dataset_dir = paths.stage("dataset")
    require_stage(cfg, paths, "veilgen")
    out = _begin_stage(cfg, paths, "pairs")

    denoiser_net = load_checkpoint(os.path.join(paths.stage("veilgen"), "denoiser.ckpt"))
    lotgmp = load_checkpoint(os.path.join(paths.stage("veilgen"), "lotgmp.ckpt"))
    denoiser_net.eval()
    lotgmp.eval()
    codec = get_codec(cfg, paths)
    sched = build_schedule(cfg)

    target = load_split(dataset_dir, "target_train", limit=n_target)
    count = cfg.pairs.count
    n_clean = cfg.pairs.n_clean or count
    seed = derive_seed(cfg.seed, "pairs")
    clean_images = [
        # fresh procedural scenes, disjoint from every dataset split
        _fresh_clean(cfg, seed + 7_000_000 + i)
        for i in range(min(n_clean, max(count, 1)))
    ]
    manifest = build_dataset(
        clean_images,
        [f"pairs_clean/{i:04d}" for i in range(len(clean_images))],
        target["degraded"],
        [rec["degraded"] for rec in target["records"]],
        count,
        lotgmp,
        numpy_denoiser(denoiser_net),
        codec,
        sched,
        cfg.schedule.sample_steps,
        cfg.pairs.w,
        cfg.pairs.t_star,
        seed,
        generator_checkpoint_id=file_sha256(
            os.path.join(paths.stage("veilgen"), "denoiser.ckpt")
        )[:16],
        out_dir=out,
    )
    verify_manifest(manifest)
    _finish_stage(cfg, paths, "pairs", [manifest], {"n_target": n_target})
    return out


def _fresh_clean(cfg: ExperimentConfig, seed: int):
    from .synthdata import make_clean_image

    return make_clean_image(seed, cfg.image.size, cfg.image.size, cfg.image.channels)


def cmd_distill(cfg: ExperimentConfig, paths: Paths | None = None) -> str:
    paths = paths or Paths(cfg.output_root)
    require_stage(cfg, paths, "pairs")
    out = _begin_stage(cfg, paths, "ddn")
    triples = load_pairs(os.path.join(paths.stage("pairs"), "pairs_manifest.jsonl"))
    triples = [(clean, maps, degraded) for clean, degraded, maps in triples]
    train_ddn(
        triples,
        cfg.distill,
        out,
        seed=derive_seed(cfg.seed, "distill"),
        map_align=cfg.simulate.map_downscale,
    )
    _finish_stage(cfg, paths, "ddn", [os.path.join(out, "ddn.ckpt")])
    return out


def cmd_benchmark_ddn(cfg: ExperimentConfig, paths: Paths | None = None, reps: int = 5) -> dict:
    """Teacher-vs-student latency and L1 at the configured image size."""
    paths = paths or Paths(cfg.output_root)
    require_stage(cfg, paths, "ddn")
    require_stage(cfg, paths, "veilgen")
    ddn = freeze(load_checkpoint(os.path.join(paths.stage("ddn"), "ddn.ckpt")))
    denoiser_net = load_checkpoint(os.path.join(paths.stage("veilgen"), "denoiser.ckpt"))
    denoiser_net.eval()
    codec = get_codec(cfg, paths)
    sched = strided_schedule(build_schedule(cfg), cfg.schedule.sample_steps)
    image = _fresh_clean(cfg, derive_seed(cfg.seed, "benchmark"))
    from .degradation import synthesize_glare_fields

    maps = synthesize_glare_fields(
        derive_seed(cfg.seed, "benchmark-maps"),
        (cfg.image.size // cfg.simulate.map_downscale,) * 2,
        cfg.simulate.glare_strength,
    )
    return benchmark_forward_models(
        ddn,
        numpy_denoiser(denoiser_net),
        codec,
        sched,
        maps,
        image,
        cfg.pairs.w,
        reps,
        os.path.join(paths.stage("ddn"), "benchmark.csv"),
    )


def cmd_train_deveiler(
    cfg: ExperimentConfig,
    paths: Paths | None = None,
    phase: str = "both",
    dataset_dir: str | None = None,
    phase1_checkpoint: str | None = None,
) -> str:
    paths = paths or Paths(cfg.output_root)
    if dataset_dir is None:
        require_stage(cfg, paths, "dataset")
        dataset_dir = paths.stage("dataset")
    out = _begin_stage(cfg, paths, "deveiler")

    source = load_split(dataset_dir, "source_train")
    source_pairs = [(c, d) for c, d in zip(source["clean"], source["degraded"])]
    seed = derive_seed(cfg.seed, "deveiler")

    artifacts = []
    net = None
    if phase in ("1", "both"):
        net, _ = train_phase1(source_pairs, cfg.restorer, out, seed)
        artifacts.append(os.path.join(out, "restorer_phase1.ckpt"))
    if phase in ("2", "both"):
        require_stage(cfg, paths, "pairs")
        require_stage(cfg, paths, "ddn")
        if net is None:
            ckpt = phase1_checkpoint or os.path.join(out, "restorer_phase1.ckpt")
            if not os.path.exists(ckpt):
                raise MissingArtifactError(
                    "phase-1 checkpoint missing; run `veilsim train-deveiler` phase 1 first",
                    required_command="train-deveiler",
                )
            net = load_checkpoint(ckpt)
        synth = load_pairs(os.path.join(paths.stage("pairs"), "pairs_manifest.jsonl"))
        synthetic_pairs = [(clean, degraded) for clean, degraded, _ in synth]
        ddn = freeze(load_checkpoint(os.path.join(paths.stage("ddn"), "ddn.ckpt")))
        train_phase2(net, synthetic_pairs, source_pairs, ddn, cfg.restorer, out, seed)
        artifacts.append(os.path.join(out, "restorer_phase2.ckpt"))
    _finish_stage(cfg, paths, "deveiler", artifacts, {"phase": phase})
    return out


def _evaluate_checkpoint(
    cfg: ExperimentConfig, ckpt_path: str, dataset_dir: str, out_dir: str, tag: str
) -> dict:
    net = load_checkpoint(ckpt_path)
    net.eval()
    os.makedirs(out_dir, exist_ok=True)
    results = {}
    for split, label in (("target_test", "compound"), ("source_test", "source")):
        data = load_split(dataset_dir, split)
        triples = []
        for rec, clean, degraded in zip(data["records"], data["clean"], data["degraded"]):
            restored, _ = restore_image(net, degraded)
            triples.append((f"{rec['index']:04d}", np.clip(restored, 0.0, 1.0), clean))
        report = compare_images(f"{tag}-{label}", triples)
        report.write_csv(os.path.join(out_dir, f"metrics_{label}.csv"))
        results[label] = {"psnr": report.mean_psnr, "ssim": report.mean_ssim}
        with open(os.path.join(out_dir, f"table_{label}.txt"), "w") as f:
            f.write(report.render_table() + "\n")
    with open(os.path.join(out_dir, "metrics.json"), "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write("\n")
    return results


def cmd_evaluate(
    cfg: ExperimentConfig,
    paths: Paths | None = None,
    checkpoint: str | None = None,
    dataset_dir: str | None = None,
) -> dict:
    paths = paths or Paths(cfg.output_root)
    if dataset_dir is None:
        require_stage(cfg, paths, "dataset")
        dataset_dir = paths.stage("dataset")
    if checkpoint is None:
        require_stage(cfg, paths, "deveiler")
        for name in ("restorer_phase2.ckpt", "restorer_phase1.ckpt"):
            candidate = os.path.join(paths.stage("deveiler"), name)
            if os.path.exists(candidate):
                checkpoint = candidate
                break
        else:
            raise MissingArtifactError(
                "no restorer checkpoint found; run `veilsim train-deveiler` first",
                required_command="train-deveiler",
            )
    out = _begin_stage(cfg, paths, "eval")
    results = _evaluate_checkpoint(cfg, checkpoint, dataset_dir, out, tag="eval")
    return results


def run_adaptation(cfg: ExperimentConfig, base_paths: Paths, n_target: int, out_root: str) -> dict:
    """One data-efficiency point: adapt with ``n_target`` unpaired images.

    Shares the base dataset and the base phase-1 checkpoint; N = 0 is the
    non-adapted source-only baseline by construction.
    """
    dataset_dir = base_paths.stage("dataset")
    phase1 = os.path.join(base_paths.stage("deveiler"), "restorer_phase1.ckpt")
    if n_target == 0:
        out = os.path.join(out_root, "eval")
        return _evaluate_checkpoint(cfg, phase1, dataset_dir, out, tag="N0")

    sub_cfg = cfg.copy()
    sub_cfg.output_root = out_root
    sub_paths = Paths(out_root)
    cmd_train_veilgen(sub_cfg, sub_paths, dataset_dir=dataset_dir, n_target=n_target)
    cmd_generate_pairs(sub_cfg, sub_paths, dataset_dir=dataset_dir, n_target=n_target)
    cmd_distill(sub_cfg, sub_paths)
    cmd_train_deveiler(
        sub_cfg,
        sub_paths,
        phase="2",
        dataset_dir=dataset_dir,
        phase1_checkpoint=phase1,
    )
    ckpt = os.path.join(sub_paths.stage("deveiler"), "restorer_phase2.ckpt")
    out = os.path.join(out_root, "eval")
    return _evaluate_checkpoint(sub_cfg, ckpt, dataset_dir, out, tag=f"N{n_target}")


def cmd_sweep(cfg: ExperimentConfig, paths: Paths | None = None) -> list:
    """Data-efficiency sweep over the configured target-corpus sizes."""
    paths = paths or Paths(cfg.output_root)
    require_stage(cfg, paths, "dataset")
    phase1 = os.path.join(paths.stage("deveiler"), "restorer_phase1.ckpt")
    if not os.path.exists(phase1):
        raise MissingArtifactError(
            "the sweep shares the phase-1 baseline; run `veilsim train-deveiler` first",
            required_command="train-deveiler",
        )
    out = _begin_stage(cfg, paths, "sweep")
    rows = []
    for n in cfg.sweep.n_values:
        if n > cfg.simulate.n_target_train:
            raise ConfigurationError(
                f"sweep N={n} exceeds the simulated target corpus "
                f"({cfg.simulate.n_target_train})"
            )
        result = run_adaptation(cfg, paths, n, os.path.join(out, f"N_{n:03d}"))
        rows.append((n, result["compound"]["psnr"]))
    write_sweep_csv(os.path.join(out, "data_efficiency.csv"), rows)
    return rows


def cmd_fit_affine(
    cfg: ExperimentConfig,
    csv_path: str | None = None,
    output_json: str | None = None,
    paths: Paths | None = None,
) -> "cal.AffineTransform":
    paths = paths or Paths(cfg.output_root)
    csv_path = csv_path or cfg.calibration.csv_path
    if csv_path is None:
        raise ConfigurationError("fit-affine needs calibration.csv_path (or --csv)")
    out = _begin_stage(cfg, paths, "calibration")
    output_json = output_json or cfg.calibration.output_json or os.path.join(
        out, "affine.json"
    )
    corr = cal.load_correspondences_csv(csv_path)
    transform = cal.fit_affine(corr)
    transform.save_json(output_json)
    residual = cal.fit_residual(transform, corr)
    with open(os.path.join(out, "fit_report.json"), "w") as f:
        json.dump({"residual_sum_sq": residual, "n_points": len(corr.src)}, f, indent=2)
        f.write("\n")
    return transform


def run_full_pipeline(cfg: ExperimentConfig) -> dict:
    """simulate -> train-veilgen -> generate-pairs -> distill ->
    train-deveiler -> evaluate, returning the final metrics dict."""
    paths = Paths(cfg.output_root)
    cmd_simulate(cfg, paths)
    cmd_train_veilgen(cfg, paths)
    cmd_generate_pairs(cfg, paths)
    cmd_distill(cfg, paths)
    cmd_train_deveiler(cfg, paths)
    return cmd_evaluate(cfg, paths)
