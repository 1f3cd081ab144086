"""Unsupervised training of the smoothing network on the energy itself.

There is no target image anywhere in this module: each step crops an
input, runs the network, evaluates the energy of the output on that crop
(guidance, B and weight scales are cached per full image and cropped
alongside), and back-propagates dE/dT through the network.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .apps import GuidancePipeline, Targets, apply_pipeline, normalize_preset_id, resolve_preset
from .energy import EnergyBreakdown, EnergyParams, EnergyProblem, compose, half_half_pmap
from .guidance import BinaryMask, GuidanceMap, load_mask
from .imagecore import Image, ImageIOError, atomic_write_bytes, crop, load_image, make_rng
from .network import Network, forward_smooth, save_model
from .optim import Adam

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".pnm")
CACHE_VERSION = 1


class PrecomputeError(Exception):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    corpus_dir: str = ""
    epochs: int = 30
    crop: int = 224
    learning_rate: float = 0.01
    seed: int = 0
    preset: str = "flatten"
    network: str = "TOY8"
    checkpoint_every: int = 1
    checkpoint_dir: str | None = None
    overfit_single: str | None = None
    p_mode: str = "dynamic"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.crop < 1:
            raise ValueError("crop must be >= 1")
        if self.network == "PAPER26" and self.crop % 2:
            raise ValueError("PAPER26 needs an even crop size")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.p_mode not in ("dynamic", "all_large", "all_small", "half_half"):
            raise ValueError("p_mode must be dynamic, all_large, all_small or half_half")
        normalize_preset_id(self.preset)


@dataclass
class CorpusEntry:
    name: str
    path: str
    image: Image
    targets: Targets


@dataclass
class CorpusIndex:
    entries: list[CorpusEntry]
    preset: str
    hits: int = 0
    misses: int = 0
    params: EnergyParams = field(default_factory=EnergyParams)

    def __len__(self):
        return len(self.entries)

    def epoch_order(self, rng) -> np.ndarray:
        return rng.permutation(len(self.entries))


def list_images(directory) -> list[str]:
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise ImageIOError(f"cannot list {directory}: {exc}") from exc
    return [os.path.join(directory, n) for n in names
            if n.lower().endswith(IMAGE_EXTS) and os.path.isfile(os.path.join(directory, n))]


def saliency_path(image_path: str) -> str:
    directory, name = os.path.split(image_path)
    return os.path.join(directory, "saliency", os.path.splitext(name)[0] + ".png")


def _cache_key(raw: bytes, saliency_raw: bytes | None, preset: str, pipe: GuidancePipeline,
               neighborhood: int) -> str:
    h = hashlib.sha256()
    h.update(raw)
    h.update(saliency_raw or b"")
    meta = {"v": CACHE_VERSION, "preset": preset, "pipe": pipe.to_dict(), "nbhd": neighborhood}
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()


def _save_targets(path, key, t: Targets):
    import io

    buf = io.BytesIO()
    wm = np.zeros((0, 0)) if t.weight_map is None else t.weight_map
    np.savez(buf, key=np.array(key), guide=t.guide.response, B=t.B.bits, weight_map=wm)
    atomic_write_bytes(path, buf.getvalue())


def _load_targets(path, key) -> Targets | None:
    try:
        with np.load(path) as z:
            if str(z["key"]) != key:
                return None
            wm = z["weight_map"]
            return Targets(GuidanceMap(z["guide"]), BinaryMask(z["B"]), None if wm.size == 0 else wm.copy())
    except (OSError, KeyError, ValueError):
        return None


def precompute_targets(corpus_dir, preset: str = "flatten", cache_dir=None,
                       params: EnergyParams | None = None, paths: list[str] | None = None) -> CorpusIndex:
    """Compute (or fetch from the sidecar cache) guidance, B and weight scales per image."""
    preset = normalize_preset_id(preset)
    preset_params, pipe = resolve_preset(preset, params)
    paths = list_images(corpus_dir) if paths is None else list(paths)
    if not paths:
        raise PrecomputeError(f"no images found in {corpus_dir}")
    cache_dir = cache_dir or os.path.join(corpus_dir or os.path.dirname(paths[0]), ".smoothlab_cache")
    os.makedirs(cache_dir, exist_ok=True)

    missing = [p for p in paths if pipe.needs_saliency and not os.path.isfile(saliency_path(p))]
    if missing:
        listing = "\n".join(f"  {p}: missing {saliency_path(p)}" for p in missing)
        raise PrecomputeError(f"preset {preset} needs saliency masks:\n{listing}")

    index = CorpusIndex([], preset, params=preset_params)
    for path in paths:
        with open(path, "rb") as fh:
            raw = fh.read()
        sal_raw = None
        if pipe.needs_saliency:
            with open(saliency_path(path), "rb") as fh:
                sal_raw = fh.read()
        key = _cache_key(raw, sal_raw, preset, pipe, preset_params.neighborhood)
        name = os.path.splitext(os.path.basename(path))[0]
        cache_file = os.path.join(cache_dir, f"{name}.{preset}.npz")
        image = load_image(path)
        targets = _load_targets(cache_file, key) if os.path.isfile(cache_file) else None
        if targets is None:
            saliency = load_mask(saliency_path(path)) if pipe.needs_saliency else None
            targets = apply_pipeline(pipe, image, saliency, preset_params.neighborhood)
            _save_targets(cache_file, key, targets)
            index.misses += 1
        else:
            index.hits += 1
        index.entries.append(CorpusEntry(name, path, image, targets))
    return index


def _crop_targets(t: Targets, x0, y0, size) -> Targets:
    wm = None if t.weight_map is None else crop(t.weight_map, x0, y0, size)
    return Targets(GuidanceMap(crop(t.guide.response, x0, y0, size)),
                   BinaryMask(crop(t.B.bits, x0, y0, size)), wm)


def _fixed_pmap(mode: str, size: int) -> np.ndarray:
    if mode == "all_large":
        return np.ones((size, size), dtype=bool)
    if mode == "all_small":
        return np.zeros((size, size), dtype=bool)
    return half_half_pmap(size, size)


def _mean_breakdown(records: list[EnergyBreakdown], params: EnergyParams) -> EnergyBreakdown:
    data = float(np.mean([r.data for r in records]))
    flat = float(np.mean([r.flatten for r in records]))
    edge = float(np.mean([r.edge for r in records]))
    return compose(data, flat, edge, params)


def _write_checkpoint(directory, net: Network, opt: Adam, epoch: int, step: int, cfg: TrainConfig):
    os.makedirs(directory, exist_ok=True)
    stem = os.path.join(directory, f"model_epoch{epoch:03d}")
    save_model(net, stem + ".usis")
    state = {"epoch": epoch, "step": step, "seed": cfg.seed, "preset": cfg.preset,
             "network": net.preset, "optimizer_digest": opt.state_digest(),
             "model_sha256": net.digest()}
    atomic_write_bytes(stem + ".json", json.dumps(state, indent=2, sort_keys=True).encode())
    save_model(net, os.path.join(directory, "latest.usis"))


def train_log_csv(history: list[EnergyBreakdown]) -> str:
    lines = ["epoch,mean_total,mean_data,mean_flatten,mean_edge"]
    for e, bd in enumerate(history, start=1):
        lines.append(f"{e},{bd.total!r},{bd.data!r},{bd.flatten!r},{bd.edge!r}")
    return "\n".join(lines) + "\n"


def train(net: Network, cfg: TrainConfig, index: CorpusIndex | None = None,
          params: EnergyParams | None = None, step_callback=None):
    """Train a copy of ``net``; returns (trained network, per-epoch mean breakdowns)."""
    if index is None:
        if cfg.overfit_single:
            index = precompute_targets(os.path.dirname(cfg.overfit_single) or ".", cfg.preset,
                                       params=params, paths=[cfg.overfit_single])
        else:
            index = precompute_targets(cfg.corpus_dir, cfg.preset, params=params)
    energy_params = index.params if params is None else resolve_preset(cfg.preset, params)[0]
    net = net.copy()
    rng = make_rng(cfg.seed)
    opt = Adam(cfg.learning_rate)
    history: list[EnergyBreakdown] = []
    step = 0
    fixed = cfg.p_mode != "dynamic"
    if cfg.checkpoint_dir and cfg.epochs == 0:
        _write_checkpoint(cfg.checkpoint_dir, net, opt, 0, 0, cfg)
        atomic_write_bytes(os.path.join(cfg.checkpoint_dir, "train_log.csv"), train_log_csv([]).encode())
    for epoch in range(1, cfg.epochs + 1):
        records = []
        for k in index.epoch_order(rng):
            entry = index.entries[k]
            img = entry.image
            size = cfg.crop
            if size > img.height or size > img.width:
                raise TrainingError(f"{entry.path}: image smaller than crop {size}")
            y0 = int(rng.integers(0, img.height - size + 1))
            x0 = int(rng.integers(0, img.width - size + 1))
            I = crop(img.data, x0, y0, size)
            t = _crop_targets(entry.targets, x0, y0, size)

            T = net.forward(I[None], training=True)[0]
            if fixed:
                # fixed-Lp studies drop the edge term, as the IRLS solver does
                prob = EnergyProblem(I, None, t.guide, energy_params, t.weight_map)
                bd, dT = prob.value_and_gradient(T, _fixed_pmap(cfg.p_mode, size))
            else:
                prob = EnergyProblem(I, t.B, t.guide, energy_params, t.weight_map)
                bd, dT = prob.value_and_gradient(T)
            if not (np.isfinite(bd.total) and np.all(np.isfinite(dT))):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = net.backward(dT[None])
            opt.step(net.parameters(), grads)
            net.round_parameters()
            records.append(bd)
            step += 1
            if step_callback is not None:
                step_callback(step, bd)
        mean = _mean_breakdown(records, energy_params)
        history.append(mean)
        log.info("epoch %d mean energy %.6g", epoch, mean.total)
        if cfg.checkpoint_dir and (epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs):
            _write_checkpoint(cfg.checkpoint_dir, net, opt, epoch, step, cfg)
            atomic_write_bytes(os.path.join(cfg.checkpoint_dir, "train_log.csv"),
                               train_log_csv(history).encode())
    return net, history


def evaluate(net: Network, image_dir=None, preset: str = "flatten", params: EnergyParams | None = None,
             index: CorpusIndex | None = None):
    """Score one forward pass per image; returns [(name, EnergyBreakdown)].

    The network sees only the image. Guidance and masks are used to score.
    """
    if index is None:
        index = precompute_targets(image_dir, preset, params=params)
    energy_params = index.params
    rows = []
    for entry in index.entries:
        T = forward_smooth(net, entry.image).data
        t = entry.targets
        prob = EnergyProblem(entry.image, t.B, t.guide, energy_params, t.weight_map)
        rows.append((entry.name, prob.breakdown(T)))
    return rows


def evaluation_csv(rows) -> str:
    lines = ["image,total,data,flatten,edge"]
    for name, bd in rows:
        lines.append(f"{name},{bd.total!r},{bd.data!r},{bd.flatten!r},{bd.edge!r}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
