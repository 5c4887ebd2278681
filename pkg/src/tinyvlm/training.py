"""Multi-stage training: LR shapes, resolution ramps, freezing policies,
weighted dataset mixtures, and deterministic checkpoint/resume.

Stage files are INI text whose keys mirror the schedule table rows
(steps, learning rate endpoints, batch size, sequence length, resolution
ramp, backbones training, data mixture). The shipped ``table3.cfg`` carries
the full-scale values; ``desk.cfg`` is the same schedule shrunk to laptop
size. A strict single-threaded deterministic path makes mid-stage resume
bit-exact.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import autograd as ag
from .adapters import set_requires_grad, trainable_names
from .assembler import ChatTurn, build_training_sequence
from .autograd import Tensor
from .checkpoint import load_arrays, save_arrays
from .image import RawImage, TileConfig, read_image, resize_longest_side, split_into_tiles
from .model import VLM
from .vocab import Vocabulary

FREEZING_POLICIES = ("frozen", "adapters", "full")
LR_SHAPES = ("constant", "linear_decay")


@dataclass
class StageConfig:
    name: str
    steps: int
    lr_max: float
    lr_min: float
    lr_shape: str
    batch_size: int
    seq_len_cap: int
    resolution_schedule: list[tuple[int, int]]
    freezing: str
    mixture: list[tuple[str, float]]
    neftune_alpha: float = 0.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError(f"stage {self.name}: steps must be >= 1, got {self.steps}")
        if self.lr_shape not in LR_SHAPES:
            raise ValueError(f"stage {self.name}: unknown lr shape {self.lr_shape!r}")
        if self.freezing not in FREEZING_POLICIES:
            raise ValueError(f"stage {self.name}: unknown freezing policy {self.freezing!r}")
        total = sum(w for _, w in self.mixture)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(
                f"stage {self.name}: mixture weights sum to {total}, expected 1.0"
            )
        froms = [s for s, _ in self.resolution_schedule]
        if froms != sorted(set(froms)):
            raise ValueError(f"stage {self.name}: resolution from_steps must strictly increase")


def lr_at_step(stage: StageConfig, step: int) -> float:
    """Constant shape holds lr_max; linear decay interpolates from lr_max at
    step 0 to exactly lr_min at the final step."""
    if not 0 <= step < stage.steps:
        raise ValueError(f"step {step} outside [0, {stage.steps})")
    if stage.lr_shape == "constant":
        return stage.lr_max
    if stage.steps == 1:
        return stage.lr_max
    frac = step / (stage.steps - 1)
    return stage.lr_min + (stage.lr_max - stage.lr_min) * (1.0 - frac)


def resolution_at_step(stage: StageConfig, step: int) -> int:
    """Piecewise-constant lookup: the last ramp entry with from_step <= step."""
    if not 0 <= step < stage.steps:
        raise ValueError(f"step {step} outside [0, {stage.steps})")
    if not stage.resolution_schedule:
        raise ValueError(f"stage {stage.name}: empty resolution schedule")
    current = None
    for from_step, res in stage.resolution_schedule:
        if from_step <= step:
            current = res
    if current is None:
        raise ValueError(f"stage {stage.name}: no resolution entry covers step {step}")
    return current


def equal_segments_ramp(resolutions: list[int], steps: int) -> list[tuple[int, int]]:
    """Split a ramp like 364 -> ... -> 1820 into equal step segments.

    With fewer steps than ramp points, colliding segments collapse to the
    later resolution so the stage still ends at its target."""
    n = len(resolutions)
    collapsed: dict[int, int] = {}
    for i, r in enumerate(resolutions):
        collapsed[steps * i // n] = r
    return sorted(collapsed.items())


@dataclass
class Example:
    """One training example: images plus chat turns. Images may be given as
    paths (loaded lazily) or in-memory RawImages (tests, synthetic data)."""

    example_id: str
    images: list[RawImage | str | Path]
    turns: list[ChatTurn]


class MixtureSampler:
    """I.i.d. dataset draws at the configured weights, with per-dataset
    cursors cycling examples in order. Deterministic under a fixed seed."""

    def __init__(
        self,
        mixture: list[tuple[str, float]],
        seed: int = 0,
        datasets: dict[str, list[Example]] | None = None,
    ):
        total = sum(w for _, w in mixture)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {total}, expected 1.0")
        self.ids = [d for d, _ in mixture]
        self.weights = np.array([w for _, w in mixture], dtype=np.float64)
        self.weights /= self.weights.sum()  # remove the <=1e-9 residue
        self.datasets = datasets
        if datasets is not None:
            for ds_id, w in mixture:
                if w > 0 and not datasets.get(ds_id):
                    raise ValueError(f"dataset {ds_id!r} has weight {w} but no examples")
        self.rng = np.random.default_rng(seed)
        self.cursors = {d: 0 for d in self.ids}

    def sample_ids(self, batch_size: int) -> list[str]:
        picks = self.rng.choice(len(self.ids), size=batch_size, p=self.weights)
        return [self.ids[i] for i in picks]

    def sample_batch(self, batch_size: int) -> list[tuple[str, Example]]:
        if self.datasets is None:
            raise ValueError("sampler was built without datasets")
        out = []
        for ds_id in self.sample_ids(batch_size):
            pool = self.datasets[ds_id]
            ex = pool[self.cursors[ds_id] % len(pool)]
            self.cursors[ds_id] += 1
            out.append((ds_id, ex))
        return out

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "cursors": dict(self.cursors)}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self.cursors.update(state["cursors"])


class AdamW:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(
        self,
        params: dict[str, Tensor],
        trainable: set[str],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        max_grad_norm: float | None = 1.0,
    ):
        self.params = params
        self.trainable = sorted(trainable)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.trainable}
        self.v = {n: np.zeros_like(params[n].data) for n in self.trainable}

    def _clip(self) -> None:
        if self.max_grad_norm is None:
            return
        sq = 0.0
        for n in self.trainable:
            g = self.params[n].grad
            if g is not None:
                sq += float((g * g).sum())
        norm = np.sqrt(sq)
        if norm > self.max_grad_norm:
            coef = self.max_grad_norm / (norm + 1e-6)
            for n in self.trainable:
                g = self.params[n].grad
                if g is not None:
                    g *= coef

    def step(self, lr: float) -> None:
        self._clip()
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for n in self.trainable:
            p = self.params[n]
            g = p.grad
            if g is None:
                continue
            m = self.m[n]
            v = self.v[n]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for n in self.trainable:
            out[f"optimizer.m.{n}"] = self.m[n]
            out[f"optimizer.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n in self.trainable:
            key_m, key_v = f"optimizer.m.{n}", f"optimizer.v.{n}"
            if key_m in arrays:
                self.m[n] = arrays[key_m].copy()
            if key_v in arrays:
                self.v[n] = arrays[key_v].copy()


@dataclass
class CheckpointMeta:
    stage_name: str
    step: int  # steps completed within the stage
    path: str
    sampler_state: dict = field(default_factory=dict)
    neftune_rng_state: dict = field(default_factory=dict)
    optimizer_t: int = 0


def save_training_checkpoint(path: str | Path, model: VLM, opt: AdamW | None, meta: CheckpointMeta) -> None:
    arrays = {name: t.data for name, t in model.params().items()}
    if opt is not None:
        arrays.update(opt.state_arrays())
    save_arrays(arrays, path)
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(
            {
                "stage_name": meta.stage_name,
                "step": meta.step,
                "sampler_state": meta.sampler_state,
                "neftune_rng_state": meta.neftune_rng_state,
                "optimizer_t": meta.optimizer_t,
            },
            fh,
            indent=1,
        )


def load_training_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays = load_arrays(path)
    meta_path = Path(str(path) + ".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return arrays, meta


def load_model_arrays(model: VLM, arrays: dict[str, np.ndarray]) -> None:
    params = model.params()
    missing = [n for n in params if n not in arrays]
    if missing:
        raise ValueError(f"checkpoint missing parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, t in params.items():
        if arrays[name].shape != t.data.shape:
            raise ValueError(
                f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {t.data.shape}"
            )
        t.data = arrays[name].copy()


class _ImageCache:
    def __init__(self) -> None:
        self._cache: dict[str, RawImage] = {}

    def get(self, img: RawImage | str | Path) -> RawImage:
        if isinstance(img, RawImage):
            return img
        key = str(img)
        if key not in self._cache:
            self._cache[key] = read_image(key)
        return self._cache[key]


def run_stage(
    stage: StageConfig,
    model: VLM,
    datasets: dict[str, list[Example]],
    vocab: Vocabulary,
    *,
    seed: int = 0,
    out_dir: str | Path | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_every: int | None = None,
    resume: CheckpointMeta | None = None,
    optimizer_arrays: dict[str, np.ndarray] | None = None,
    weight_decay: float = 0.0,
) -> CheckpointMeta:
    """Run one stage: sample -> preprocess at the step's resolution ->
    assemble -> forward -> masked loss -> backward -> clipped AdamW update.

    Single-threaded and fully deterministic under (seed, resume state);
    resuming from a mid-stage checkpoint reproduces the uninterrupted
    trajectory bit-exactly.
    """
    params = model.params()
    trainable = trainable_names(params, stage.freezing)
    set_requires_grad(params, trainable)
    opt = AdamW(params, trainable, weight_decay=weight_decay)
    sampler = MixtureSampler(stage.mixture, seed=seed, datasets=datasets)
    neftune_rng = np.random.default_rng(seed + 1)
    start_step = 0
    if resume is not None:
        sampler.restore(resume.sampler_state)
        neftune_rng.bit_generator.state = resume.neftune_rng_state
        opt.t = resume.optimizer_t
        start_step = resume.step
        if optimizer_arrays is not None:
            opt.load_state_arrays(optimizer_arrays)

    cache = _ImageCache()
    cross_mode = model.fusion_cfg.mode == "cross_attention"
    per_tile = None if cross_mode else model.tokens_per_tile()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    metrics_file = None
    writer = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fresh = not Path(metrics_path).exists()
        metrics_file = open(metrics_path, "a", newline="", encoding="utf-8")
        writer = csv.writer(metrics_file)
        if fresh:
            writer.writerow(["step", "stage", "lr", "resolution", "loss", "tokens_per_sec"])

    def checkpoint(step_done: int, tag: str) -> CheckpointMeta:
        meta = CheckpointMeta(
            stage_name=stage.name,
            step=step_done,
            path="" if out_dir is None else str(out_dir / f"{stage.name}_{tag}.tvlm"),
            sampler_state=sampler.state(),
            neftune_rng_state=neftune_rng.bit_generator.state,
            optimizer_t=opt.t,
        )
        if out_dir is not None:
            save_training_checkpoint(meta.path, model, opt, meta)
        return meta

    meta: CheckpointMeta
    try:
        for step in range(start_step, stage.steps):
            lr = lr_at_step(stage, step)
            res = resolution_at_step(stage, step)
            tile_cfg = TileConfig(tile_side=model.tile_side, max_long_side=res)
            batch = sampler.sample_batch(stage.batch_size)
            ag.zero_grads(params.values())
            t0 = time.perf_counter()
            loss_sum = 0.0
            token_count = 0
            for ds_id, ex in batch:
                grids = []
                for im in ex.images:
                    img = cache.get(im)
                    if max(img.height, img.width) > res:  # resolution is a cap
                        img = resize_longest_side(img, res)
                    grids.append(split_into_tiles(img, tile_cfg))
                seq = build_training_sequence(
                    ex.turns,
                    vocab,
                    grids,
                    per_tile_tokens=per_tile if per_tile is not None else 1,
                    seq_len_cap=stage.seq_len_cap,
                    example_id=ex.example_id,
                    cross_attention=cross_mode,
                )
                loss = model.loss(
                    seq,
                    grids,
                    training=True,
                    neftune_alpha=stage.neftune_alpha,
                    rng=neftune_rng,
                )
                ag.backward(ag.scale(loss, 1.0 / len(batch)))
                loss_sum += loss.item()
                token_count += len(seq)
            opt.step(lr)
            elapsed = time.perf_counter() - t0
            if writer is not None:
                writer.writerow(
                    [step, stage.name, lr, res, loss_sum / len(batch), round(token_count / max(elapsed, 1e-9), 1)]
                )
            if (
                checkpoint_every is not None
                and out_dir is not None
                and (step + 1) % checkpoint_every == 0
                and step + 1 < stage.steps
            ):
                meta = checkpoint(step + 1, f"step{step + 1}")
        meta = checkpoint(stage.steps, "final")
    finally:
        if metrics_file is not None:
            metrics_file.close()
    return meta


# ---------------------------------------------------------------------------
# stage config files

_RES_SEP = "->"


def _format_mixture(mixture: list[tuple[str, float]]) -> str:
    return ", ".join(f"{d}: {w:g}" for d, w in mixture)


def _parse_mixture(text: str) -> list[tuple[str, float]]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        ds, _, w = part.partition(":")
        out.append((ds.strip(), float(w)))
    return out


def dump_stage_file(stages: list[StageConfig], path: str | Path) -> None:
    lines: list[str] = []
    for st in stages:
        lines.append(f"[{st.name}]")
        lines.append(f"steps = {st.steps}")
        lines.append(f"learning_rate = {st.lr_max:g}, {st.lr_min:g}")
        lines.append(f"batch_size = {st.batch_size}")
        lines.append(f"sequence_length = {st.seq_len_cap}")
        resolutions = [r for _, r in st.resolution_schedule]
        if len(set(resolutions)) == 1:
            lines.append(f"max_image_resolution = {resolutions[0]}")
        else:
            lines.append(f"max_image_resolution = {f' {_RES_SEP} '.join(str(r) for r in resolutions)}")
        lines.append(f"backbones_training = {st.freezing}")
        lines.append(f"data = {_format_mixture(st.mixture)}")
        if st.neftune_alpha:
            lines.append(f"neftune_alpha = {st.neftune_alpha:g}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def load_stage_file(path: str | Path) -> list[StageConfig]:
    import configparser

    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise OSError(f"cannot read stage config {path}")
    stages: list[StageConfig] = []
    for section in parser.sections():
        sec = parser[section]
        steps = int(sec["steps"])
        lr_parts = [float(x) for x in sec["learning_rate"].replace("(", "").replace(")", "").split(",")]
        lr_max, lr_min = lr_parts[0], lr_parts[1]
        resolutions = [int(r.strip()) for r in sec["max_image_resolution"].split(_RES_SEP)]
        schedule = equal_segments_ramp(resolutions, steps)
        stages.append(
            StageConfig(
                name=section,
                steps=steps,
                lr_max=lr_max,
                lr_min=lr_min,
                lr_shape="constant" if lr_max == lr_min else "linear_decay",
                batch_size=int(sec["batch_size"]),
                seq_len_cap=int(sec["sequence_length"]),
                resolution_schedule=schedule,
                freezing=sec["backbones_training"].strip(),
                mixture=_parse_mixture(sec["data"]),
                neftune_alpha=float(sec.get("neftune_alpha", "0")),
            )
        )
    return stages


def builtin_config_path(name: str) -> Path:
    """Path of a shipped stage config ("table3" or "desk")."""
    root = resources.files("tinyvlm").joinpath("configs")
    p = Path(str(root.joinpath(f"{name}.cfg")))
    if not p.exists():
        raise ValueError(f"no builtin config named {name!r}")
    return p


def scale_stage(stage: StageConfig, *, max_steps: int | None = None, batch_size: int | None = None) -> StageConfig:
    """Desk-scale override: shrink step count and batch while preserving the
    schedule shape (ramp segment boundaries rescale proportionally)."""
    new = stage
    if max_steps is not None and max_steps < stage.steps:
        resolutions = [r for _, r in stage.resolution_schedule]
        new = replace(
            new,
            steps=max_steps,
            resolution_schedule=equal_segments_ramp(resolutions, max_steps),
        )
    if batch_size is not None:
        new = replace(new, batch_size=batch_size)
    return new
