"""Training loop: batches of synthetic scenes, SGD steps, CSV logging,
checkpointing. A non-finite loss aborts with a diagnostic tensor dump.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import reports, scenes, tensorio
from .autodiff import backward
from .config import RunConfig
from .errors import TrainingDiverged
from .head import BRANCHES, DetectionHead, SgdMomentum, assign_labels, stack_labels
from .masking import dump_mask

CHECKPOINT_FILE = "params.bin"
MANIFEST_FILE = "manifest.json"
LOSS_CSV = "losses.csv"


@dataclass
class TrainArtifacts:
    out_dir: Path
    csv_path: Path
    checkpoint_path: Path
    head: DetectionHead


def loss_csv_header(num_levels: int) -> list[str]:
    cols = ["step", "det_loss", "norm_loss", "amm_loss", "total"]
    cols += [f"act_L{i}" for i in range(num_levels)]
    cols += [f"target_L{i}" for i in range(num_levels)]
    return cols


def sample_batch(spec, head_cfg, rng, batch_size):
    feats_per_scene, labels_per_scene = [], []
    for _ in range(batch_size):
        scene, feats = scenes.gen_scene(spec, head_cfg, rng)
        feats_per_scene.append(feats)
        labels_per_scene.append(assign_labels(scene, head_cfg))
    batched = [
        np.concatenate([f[k] for f in feats_per_scene], axis=0)
        for k in range(head_cfg.num_levels)
    ]
    return batched, stack_labels(labels_per_scene)


def train(cfg: RunConfig) -> TrainArtifacts:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    head_cfg = cfg.head_config()
    spec = cfg.scene_spec()
    weights = cfg.loss_weights()

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    scene_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])

    head = DetectionHead(head_cfg)
    opt = SgdMomentum(head.parameters(), lr=cfg.train.lr,
                      momentum=cfg.train.momentum, grad_clip=cfg.train.grad_clip)

    rows = []
    for step in range(cfg.train.steps):
        feats, labels = sample_batch(spec, head_cfg, scene_rng, cfg.train.batch_size)
        result = head.forward_train(feats, labels, noise_rng, weights)
        total = result.losses["total"]
        if not np.isfinite(total.data):
            _dump_diagnostics(out_dir, step, feats, result)
            raise TrainingDiverged(
                f"non-finite loss at step {step}; tensors dumped under {out_dir / 'diagnostics'}"
            )
        opt.zero_grad()
        backward(total)
        opt.step()

        row = [step,
               float(result.losses["det"].data), float(result.losses["norm"].data),
               float(result.losses["amm"].data), float(total.data)]
        row += [float(np.mean([result.hard_ratios[i][b] for b in BRANCHES]))
                for i in range(head_cfg.num_levels)]
        row += [float(t) for t in result.targets]
        rows.append(row)

    csv_path = out_dir / LOSS_CSV
    reports.write_csv(csv_path, loss_csv_header(head_cfg.num_levels), rows)
    save_head(out_dir, head, cfg)
    if cfg.figures:
        reports.training_figures(csv_path, head_cfg.num_levels, out_dir)
    return TrainArtifacts(out_dir, csv_path, out_dir / CHECKPOINT_FILE, head)


def _dump_diagnostics(out_dir: Path, step: int, feats, result) -> None:
    diag = out_dir / "diagnostics"
    diag.mkdir(parents=True, exist_ok=True)
    for level, x in enumerate(feats):
        tensorio.dump_tensor(diag / f"step{step}_feats_L{level}.ct4", x)
    for level, masks in enumerate(result.outputs.masks):
        for branch, mask in masks.items():
            tensorio.dump_tensor(diag / f"step{step}_mask_L{level}_{branch}.ct4", dump_mask(mask))
    summary = {name: float(t.data) for name, t in result.losses.items()}
    (diag / f"step{step}_losses.json").write_text(json.dumps(summary, indent=2))


# -- checkpoints ---------------------------------------------------------------


def head_state(head: DetectionHead) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in head.parameters().items()}
    for branch in BRANCHES:
        for j, layer in enumerate(head.branches[branch]["layers"], start=1):
            state[f"{branch}.layer{j}.norm.running_mean"] = layer.bn_mean
            state[f"{branch}.layer{j}.norm.running_var"] = layer.bn_var
    return state


def save_head(out_dir: Path, head: DetectionHead, cfg: RunConfig) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CHECKPOINT_FILE
    tensorio.save_checkpoint(path, head_state(head))
    manifest = {
        "config": config_mod.to_dict(cfg),
        "parameters": sorted(head_state(head)),
        "seed": cfg.seed,
        "format": "CEASC1 blob list of CT4 tensor records",
    }
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_head(run_dir: str | Path) -> tuple[DetectionHead, RunConfig]:
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / MANIFEST_FILE).read_text())
    cfg = config_mod.from_dict(manifest["config"])
    head = DetectionHead(cfg.head_config())
    blobs = tensorio.load_checkpoint(run_dir / CHECKPOINT_FILE)
    for name, param in head.parameters().items():
        param.data[...] = blobs[name].reshape(param.data.shape).astype(param.data.dtype)
        param.invalidate_cache()
    for branch in BRANCHES:
        for j, layer in enumerate(head.branches[branch]["layers"], start=1):
            layer.bn_mean = blobs[f"{branch}.layer{j}.norm.running_mean"].reshape(-1).astype(np.float64)
            layer.bn_var = blobs[f"{branch}.layer{j}.norm.running_var"].reshape(-1).astype(np.float64)
    return head, cfg
