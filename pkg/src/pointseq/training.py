"""Training harness: pretraining loop, linear probe, gradient-check command,
and ablation sweeps.

Pretraining is Adam with a cosine-annealed learning rate; probing freezes
the encoder, pools per-sequence features, and fits one linear layer with
SGD momentum under a warmup + cosine schedule. Every run is deterministic
given (config, seed, data).
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import pointseq.autodiff as ad
from pointseq.autodiff import FiniteDiffReport, ParamSet
from pointseq.config import RunConfig, config_json, micro_config
from pointseq.data import (
    Checkpoint,
    SyntheticSpec,
    generate_synthetic,
    load_sequence,
    save_checkpoint,
)
from pointseq.errors import ConfigError, DataError, NumericError
from pointseq.geometry import normalize_sequence
from pointseq.pipeline import (
    SequenceGeometry,
    build_sequence_geometry,
    compute_batch_losses,
    encoder_pooled_features,
    init_params,
    loss_expr,
    param_shapes,
)

METRICS_HEADER = "step,L_l,L_g,d_recon,L_total,lr,wall_ms"
LR_FLOOR = 1e-6
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# ---------------------------------------------------------------------------
# schedules and optimizers
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, end_lr: float = LR_FLOOR) -> float:
    """Cosine annealing from base_lr (step 0) to end_lr (final step)."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return end_lr + 0.5 * (base_lr - end_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: ParamSet, grads: Dict[str, np.ndarray], state: AdamState,
                lr: float, clip_grad: float = 0.0) -> None:
    """One Adam step over the trainable parameters, in lexicographic order."""
    if clip_grad > 0.0:
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if norm > clip_grad:
            scale = clip_grad / norm
            grads = {k: g * scale for k, g in grads.items()}
    b1, b2 = ADAM_BETAS
    state.t += 1
    bias1 = 1.0 - b1 ** state.t
    bias2 = 1.0 - b2 ** state.t
    for name in params.trainable_names():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        step_arr = lr * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        params.set_value(name, params.value(name) - step_arr)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

def _fit_length(frames: np.ndarray, cfg: RunConfig, path: str) -> np.ndarray:
    t = frames.shape[0]
    if t == cfg.T:
        return frames
    strided = frames[:: cfg.frame_stride]
    if strided.shape[0] < cfg.T:
        raise DataError(
            f"{path}: {t} frames cannot provide T={cfg.T} at stride {cfg.frame_stride}")
    return strided[: cfg.T]


@dataclass
class LoadedSequence:
    frames: np.ndarray
    label: Optional[int]
    source_id: str


def load_split_sequences(manifest: Sequence[dict], cfg: RunConfig,
                         split: str) -> List[LoadedSequence]:
    """Load and normalize every manifest entry of a split."""
    out = []
    for entry in manifest:
        if entry.get("split", "train") != split:
            continue
        seq = load_sequence(entry["path"])
        frames = _fit_length(seq.frames, cfg, entry["path"])
        frames, _ = normalize_sequence(frames)
        out.append(LoadedSequence(frames.astype(np.float32), seq.label, seq.source_id))
    return out


def load_split_geometries(manifest: Sequence[dict], cfg: RunConfig, split: str,
                          cache: Optional[Dict[str, SequenceGeometry]] = None
                          ) -> List[SequenceGeometry]:
    """Load, normalize, and pack clean (unaugmented) geometry for a split."""
    entries = [e for e in manifest if e.get("split", "train") == split]
    geoms: List[SequenceGeometry] = []
    for entry in entries:
        path = entry["path"]
        if cache is not None and path in cache:
            geoms.append(cache[path])
            continue
        seq = load_sequence(path)
        frames = _fit_length(seq.frames, cfg, path)
        frames, _ = normalize_sequence(frames)
        geom = build_sequence_geometry(frames.astype(np.float32), cfg,
                                       label=seq.label, source_id=seq.source_id)
        if cache is not None:
            cache[path] = geom
        geoms.append(geom)
    return geoms


def _format_float(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def pretrain(cfg: RunConfig, manifest: Sequence[dict], out_dir: Union[str, Path],
             sequences: Optional[Sequence[LoadedSequence]] = None,
             log_every: int = 0) -> Tuple[Checkpoint, List[str]]:
    """Run the self-supervised pretraining loop.

    With cfg.augment, each batch element is rescaled by a seeded random
    factor and anchors are re-sampled from seeded random starts; otherwise
    the per-sequence geometry is packed once and reused. Returns the final
    checkpoint and the metrics rows (also written to out_dir/metrics.csv,
    with per-epoch and final checkpoints alongside).
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if sequences is None:
        sequences = load_split_sequences(manifest, cfg, "train")
    if not sequences:
        raise DataError("pretrain: no training sequences in manifest")
    if len(sequences) < cfg.batch:
        raise DataError(f"pretrain: {len(sequences)} training sequences < batch size {cfg.batch}")

    fixed_geoms: Optional[List[SequenceGeometry]] = None
    if not cfg.augment:
        fixed_geoms = [build_sequence_geometry(s.frames, cfg, s.label, s.source_id)
                       for s in sequences]

    params = init_params(cfg, cfg.seed)
    batch_rng = np.random.default_rng([cfg.seed, 1])
    aug_rng = np.random.default_rng([cfg.seed, 4])
    state = AdamState()
    steps_per_epoch = len(sequences) // cfg.batch
    total_steps = cfg.epochs * steps_per_epoch
    enabled = cfg.toggles

    rows: List[str] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(sequences))
        for chunk_start in range(0, steps_per_epoch * cfg.batch, cfg.batch):
            batch_idx = order[chunk_start:chunk_start + cfg.batch]
            t0 = time.perf_counter()
            if fixed_geoms is not None:
                batch_geoms = [fixed_geoms[i] for i in batch_idx]
            else:
                batch_geoms = []
                for i in batch_idx:
                    seq = sequences[i]
                    scale = np.float32(aug_rng.uniform(0.9, 1.1))
                    batch_geoms.append(build_sequence_geometry(
                        seq.frames * scale, cfg, seq.label, seq.source_id,
                        fps_rng=aug_rng))

            leaves = ad.make_leaves(params)
            losses = compute_batch_losses(leaves, batch_geoms, cfg)
            values = {name: float(t.data) for name, t in losses.items()}
            if not all(np.isfinite(v) for v in values.values()):
                raise NumericError(
                    f"non-finite loss at step {step}: "
                    + ", ".join(f"{k}={v}" for k, v in sorted(values.items())))
            grads = ad.grads_by_name(losses["total"], leaves, params.trainable_names())
            lr = cosine_lr(step, total_steps, cfg.lr)
            adam_update(params, grads, state, lr, cfg.clip_grad)

            wall_ms = (time.perf_counter() - t0) * 1000.0
            rows.append(",".join([
                str(step),
                _format_float(values.get("local", 0.0) if enabled.local_on else 0.0),
                _format_float(values.get("global", 0.0) if enabled.global_on else 0.0),
                _format_float(values.get("recon", 0.0) if enabled.recon_on else 0.0),
                _format_float(values["total"]),
                _format_float(lr),
                f"{wall_ms:.3f}",
            ]))
            if log_every and step % log_every == 0:
                print(f"step {step}/{total_steps} total={values['total']:.4f} lr={lr:.2e}")
            step += 1
        ckpt = Checkpoint(config=cfg.to_json_dict(), params=params.copy(), step=step,
                          rng_state=batch_rng.bit_generator.state)
        save_checkpoint(ckpt, out_dir / f"ckpt-epoch{epoch:03d}.cpr")

    final = Checkpoint(config=cfg.to_json_dict(), params=params, step=step,
                       rng_state=batch_rng.bit_generator.state)
    save_checkpoint(final, out_dir / "ckpt-final.cpr")
    (out_dir / "metrics.csv").write_text("\n".join([METRICS_HEADER] + rows) + "\n")
    return final, rows


def load_run_checkpoint(path: Union[str, Path]) -> Tuple[Checkpoint, RunConfig]:
    """Load a checkpoint and verify its parameters against the embedded config."""
    from pointseq.data import load_checkpoint, verify_param_shapes

    ckpt = load_checkpoint(path)
    cfg = RunConfig.from_json_dict(ckpt.config)
    cfg.validate()
    verify_param_shapes(ckpt.params, param_shapes(cfg))
    return ckpt, cfg


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------

def probe_lr_schedule(epoch: int, epochs: int, base_lr: float, warmup: int) -> float:
    if epoch < warmup:
        return base_lr * (epoch + 1) / warmup
    span = max(epochs - warmup, 1)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * (epoch - warmup) / span))


def linear_probe(params: ParamSet, cfg: RunConfig, manifest: Sequence[dict],
                 epochs: int = 60, probe_lr: float = 0.01, probe_batch: int = 16,
                 warmup: int = 10, momentum: float = 0.9, seed: int = 0,
                 cache: Optional[Dict[str, SequenceGeometry]] = None,
                 feature_chunk: int = 16) -> float:
    """Freeze the encoder, fit one linear layer on pooled sequence features,
    and report top-1 accuracy on the val split."""
    train_geoms = load_split_geometries(manifest, cfg, "train", cache)
    val_geoms = load_split_geometries(manifest, cfg, "val", cache)
    if not train_geoms or not val_geoms:
        raise DataError("linear_probe: manifest needs both train and val entries")
    if any(g.label is None for g in train_geoms + val_geoms):
        raise DataError("linear_probe: manifest contains unlabeled sequences")

    def features(geoms):
        blocks = [encoder_pooled_features(params, geoms[i:i + feature_chunk], cfg)
                  for i in range(0, len(geoms), feature_chunk)]
        return np.concatenate(blocks, axis=0)

    x_train = features(train_geoms).astype(np.float64)
    x_val = features(val_geoms).astype(np.float64)
    y_train = np.array([g.label for g in train_geoms])
    y_val = np.array([g.label for g in val_geoms])
    n_classes = int(max(y_train.max(), y_val.max())) + 1

    # standardize with train statistics; the transform is frozen like the encoder
    mu = x_train.mean(axis=0)
    sigma = x_train.std(axis=0) + 1e-6
    x_train = (x_train - mu) / sigma
    x_val = (x_val - mu) / sigma

    c = x_train.shape[1]
    w = np.zeros((c, n_classes))
    b = np.zeros(n_classes)
    vel_w = np.zeros_like(w)
    vel_b = np.zeros_like(b)
    onehot = np.eye(n_classes)[y_train]
    rng = np.random.default_rng([seed, 2])

    n = x_train.shape[0]
    for epoch in range(epochs):
        lr = probe_lr_schedule(epoch, epochs, probe_lr, warmup)
        order = rng.permutation(n)
        for start in range(0, n, probe_batch):
            idx = order[start:start + probe_batch]
            xb, yb = x_train[idx], onehot[idx]
            logits = xb @ w + b
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            delta = (probs - yb) / len(idx)
            gw = xb.T @ delta
            gb = delta.sum(axis=0)
            vel_w = momentum * vel_w + gw
            vel_b = momentum * vel_b + gb
            w -= lr * vel_w
            b -= lr * vel_b

    pred = np.argmax(x_val @ w + b, axis=1)
    return float((pred == y_val).mean())


# ---------------------------------------------------------------------------
# gradient-check command
# ---------------------------------------------------------------------------

GRADCHECK_TOLERANCE = 1e-4
_COMPONENT_SKIPS = {
    "local": ("dec.", "head.global."),
    "global": ("dec.", "head.local."),
    "recon": ("head.",),
    "total": (),
}


def micro_geometries(cfg: RunConfig, seed: int = 0) -> List[SequenceGeometry]:
    geoms = []
    for i in range(cfg.batch):
        spec = SyntheticSpec(class_id=i % 8, shape="sphere-surface", speed=0.08,
                             seed=seed + i)
        seq = generate_synthetic(spec, T=cfg.T, N=cfg.N)
        geoms.append(build_sequence_geometry(seq.frames.astype(np.float64), cfg,
                                             label=seq.label, source_id=seq.source_id))
    return geoms


def gradient_check_report(seed: int = 0,
                          components: Sequence[str] = ("local", "global", "recon", "total"),
                          wrt: Optional[Sequence[str]] = None,
                          eps: float = 1e-5) -> Dict[str, FiniteDiffReport]:
    """Finite-difference verification of every loss component on the micro
    instance, at float64."""
    cfg = micro_config()
    cfg.validate()
    geoms = micro_geometries(cfg, seed)
    params = init_params(cfg, seed).astype(np.float64)
    reports = {}
    for comp in components:
        if wrt is not None:
            names = list(wrt)
        else:
            skips = _COMPONENT_SKIPS[comp]
            names = [n for n in params.trainable_names()
                     if not any(n.startswith(s) for s in skips)]
        reports[comp] = ad.finite_difference_check(loss_expr(geoms, cfg, comp), params,
                                                   eps=eps, wrt=names)
    return reports


def gradcheck_main(reports: Dict[str, FiniteDiffReport],
                   tolerance: float = GRADCHECK_TOLERANCE) -> int:
    """Print one line per component and return the process exit code."""
    failed = False
    for comp, report in reports.items():
        status = "ok" if report.max_rel_error < tolerance else "FAIL"
        print(f"{comp}: max_rel_error={report.max_rel_error:.3e} "
              f"worst={report.worst_name}[{report.worst_index}] {status}")
        if report.max_rel_error >= tolerance:
            failed = True
    return 4 if failed else 0


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

_ABLATE_TOKENS = ("local", "global", "recon", "hard", "nocolor", "xbatch")


def parse_toggle_combos(spec: str) -> List[Tuple[str, ...]]:
    """Parse "local;local,global;..." into unique token tuples (warn on dupes)."""
    combos: List[Tuple[str, ...]] = []
    seen = set()
    for chunk in spec.split(";"):
        tokens = tuple(sorted({t.strip() for t in chunk.split(",") if t.strip()}))
        if not tokens:
            continue
        for t in tokens:
            if t not in _ABLATE_TOKENS:
                raise ConfigError(f"unknown ablation token {t!r}, expected {_ABLATE_TOKENS}")
        if tokens in seen:
            print(f"warning: duplicate toggle combo {','.join(tokens)} ignored")
            continue
        seen.add(tokens)
        combos.append(tokens)
    if not combos:
        raise ConfigError("no toggle combos given")
    return combos


def apply_combo(cfg: RunConfig, tokens: Sequence[str]) -> RunConfig:
    toggles = dataclasses.replace(
        cfg.toggles,
        local_on="local" in tokens,
        global_on="global" in tokens,
        recon_on="recon" in tokens,
        hard_negatives_on="hard" in tokens,
        colorize_on="recon" in tokens and "nocolor" not in tokens,
        cross_batch_local="xbatch" in tokens,
    )
    out = dataclasses.replace(cfg, toggles=toggles)
    out.validate()
    return out


def ablate(cfg: RunConfig, combo_spec: str, manifest: Sequence[dict],
           out_dir: Union[str, Path], probe_epochs: int = 60) -> List[dict]:
    """Pretrain + probe per toggle combo with a shared seed; returns and
    writes one row per combo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    combos = parse_toggle_combos(combo_spec)
    results = []
    for tokens in combos:
        name = ",".join(tokens)
        run_cfg = apply_combo(cfg, tokens)
        run_dir = out_dir / ("run_" + "_".join(tokens))
        ckpt, _ = pretrain(run_cfg, manifest, run_dir)
        accuracy = linear_probe(ckpt.params, run_cfg, manifest,
                                epochs=probe_epochs, seed=run_cfg.seed)
        print(f"ablate {name}: accuracy={accuracy:.4f}")
        results.append({"combo": name, "accuracy": accuracy})
    lines = ["combo,accuracy"] + [f"\"{r['combo']}\",{r['accuracy']!r}" for r in results]
    (out_dir / "ablate.csv").write_text("\n".join(lines) + "\n")
    return results
