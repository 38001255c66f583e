"""Conditional IMLE: latent sampling, nearest-sample selection and training.

Every latent is a pure function of the key ``(seed, stream, epoch, item,
stage, candidate)``. Selections can therefore be re-run exactly, in any
order or batching.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from .distance import get_distance, per_scale_distances, selection_distance
from .errors import ConfigError, ContractError, TrainingError
from .generator import CamNet, CascadeConfig, LatentCode, LatentPyramid, init_weights, save_checkpoint
from .numerics import Adam
from .pyramid import ImagePyramid, build_pyramid, conditioning_pyramid

log = logging.getLogger(__name__)

# rng streams keep training, test-time and benchmark latents disjoint
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_BENCH = 2
STREAM_SHUFFLE = 3


@dataclass
class TrainConfig:
    m_per_stage: list[int] = field(default_factory=lambda: [4, 4, 4, 4])
    reselect_every: int = 1
    epochs: int = 10
    batch_size: int = 16
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hs: bool = True
    mapping: bool = True
    intermediate_supervision: bool = True
    weight_norm: bool = True
    distance_backend: str = "proxy"
    select_chunk: int = 64

    def __post_init__(self):
        self.m_per_stage = [int(m) for m in self.m_per_stage]
        if not self.m_per_stage or min(self.m_per_stage) < 1:
            raise ConfigError(f"train.m_per_stage entries must be >= 1, got {self.m_per_stage}")
        if self.reselect_every < 1:
            raise ConfigError("train.reselect_every must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.select_chunk < 1:
            raise ConfigError("train.epochs must be >= 0, batch_size and select_chunk >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")

    @property
    def m_total(self) -> int:
        return sum(self.m_per_stage)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


def effective_cascade(cascade: CascadeConfig, train: TrainConfig) -> CascadeConfig:
    """Apply the mapping / weight-norm ablation flags to the architecture."""
    return replace(cascade,
                   mapping_enabled=cascade.mapping_enabled and train.mapping,
                   weight_norm=cascade.weight_norm and train.weight_norm)


# -- latents ----------------------------------------------------------------

def draw_code(cfg: CascadeConfig, k: int, key: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal (spatial, global) pair for module ``k`` from an integer key."""
    rng = np.random.default_rng(np.random.SeedSequence([int(x) for x in key]))
    r = cfg.resolution(k)
    spatial = rng.standard_normal((cfg.latent_spatial_ch, r, r), dtype=np.float32)
    glob = rng.standard_normal(cfg.latent_global_dim, dtype=np.float32)
    return spatial, glob


def sample_codes(cfg: CascadeConfig, k: int, seed: int, stream: int, epoch: int,
                 items: Sequence[int], candidates: Sequence[int]) -> LatentCode:
    """Codes for module ``k``, batch ordered item-major: (item0, cand0), (item0, cand1), ..."""
    pairs = [draw_code(cfg, k, (seed, stream, epoch, i, k, j)) for i in items for j in candidates]
    return LatentCode(torch.from_numpy(np.stack([p[0] for p in pairs])),
                      torch.from_numpy(np.stack([p[1] for p in pairs])))


def sample_latents(cfg: CascadeConfig, seed: int, stream: int, epoch: int,
                   items: Sequence[int], candidates: Sequence[int]) -> LatentPyramid:
    """Full latent pyramids, one per (item, candidate); stage k uses key stage=k."""
    return LatentPyramid([sample_codes(cfg, k, seed, stream, epoch, items, candidates) for k in range(cfg.K)])


# -- selection --------------------------------------------------------------

@dataclass
class SelectionRecord:
    """Chosen latents for a batch of training inputs."""

    latents: LatentPyramid
    indices: np.ndarray      # (B, K) chosen candidate per stage
    distances: np.ndarray    # (B, K) selection distance of the chosen sample at each stage
    epoch: int
    evaluations: int = 0     # candidate forward evaluations spent, summed over the batch


def _repeat(t: Tensor, m: int) -> Tensor:
    return t.repeat_interleave(m, dim=0)


@torch.no_grad()
def hierarchical_select(net: CamNet, input_pyr: ImagePyramid, target_pyr: ImagePyramid,
                        m_per_stage: Sequence[int], items: Sequence[int], epoch: int, seed: int,
                        stream: int = STREAM_TRAIN, backend: str = "proxy") -> SelectionRecord:
    """Stage-wise search: fix the codes already chosen, try ``m_k`` codes for module k.

    Earlier modules see only their chosen codes, so their outputs are shared
    by all candidates of the current stage and are computed once.
    """
    cfg = net.cfg
    if len(m_per_stage) < cfg.K:
        raise ConfigError(f"need {cfg.K} per-stage sample counts, got {list(m_per_stage)}")
    B = len(items)
    chosen: list[LatentCode] = []
    indices = np.zeros((B, cfg.K), dtype=np.int64)
    dists = np.zeros((B, cfg.K))
    prev = None
    evaluations = 0
    for k in range(cfg.K):
        m = int(m_per_stage[k])
        cand = sample_codes(cfg, k, seed, stream, epoch, items, range(m))
        prev_rep = None if prev is None else _repeat(prev, m)
        out = net.module_forward(k, _repeat(input_pyr.levels[k], m), prev_rep, cand)
        d = selection_distance(out, _repeat(target_pyr.levels[k], m), backend).reshape(B, m)
        best = torch.argmin(d, dim=1)  # first minimum on ties
        flat = torch.arange(B) * m + best
        chosen.append(cand.select(flat))
        prev = out[flat]
        indices[:, k] = best.numpy()
        dists[:, k] = d[torch.arange(B), best].double().numpy()
        evaluations += B * m
    return SelectionRecord(LatentPyramid(chosen), indices, dists, epoch, evaluations)


@torch.no_grad()
def vanilla_select(net: CamNet, input_pyr: ImagePyramid, target_pyr: ImagePyramid, m_total: int,
                   items: Sequence[int], epoch: int, seed: int, stream: int = STREAM_TRAIN,
                   backend: str = "proxy") -> SelectionRecord:
    """Independent full pyramids, ranked by the finest-scale distance only."""
    cfg = net.cfg
    B = len(items)
    cands = sample_latents(cfg, seed, stream, epoch, items, range(m_total))
    outs = net.cascade_forward(ImagePyramid([_repeat(t, m_total) for t in input_pyr.levels]), cands)
    d = selection_distance(outs[-1], _repeat(target_pyr.levels[-1], m_total), backend).reshape(B, m_total)
    best = torch.argmin(d, dim=1)
    flat = torch.arange(B) * m_total + best
    dist = get_distance(backend)
    per_stage = np.stack([dist(o[flat], t).double().numpy() for o, t in zip(outs, target_pyr.levels)], axis=1)
    indices = np.repeat(best.numpy()[:, None], cfg.K, axis=1)
    return SelectionRecord(cands.select(flat), indices, per_stage, epoch, B * m_total)


# -- objective --------------------------------------------------------------

def cimle_objective(net: CamNet, input_pyr: ImagePyramid, target_pyr: ImagePyramid, latents: LatentPyramid,
                    selection_epoch: int | None = None, current_epoch: int | None = None,
                    reselect_every: int = 1, intermediate_supervision: bool = True,
                    backend: str = "proxy") -> tuple[Tensor, list[float]]:
    """Batch-mean multi-scale distance of the selected samples.

    Returns the differentiable loss and the per-scale batch means (floats,
    for logging). Without intermediate supervision only the finest scale
    enters the loss.
    """
    if selection_epoch is not None and current_epoch is not None:
        if current_epoch - selection_epoch > reselect_every or current_epoch < selection_epoch:
            raise ContractError(
                f"selection from epoch {selection_epoch} is stale at epoch {current_epoch} "
                f"(reselect_every={reselect_every})")
    outs = net.cascade_forward(input_pyr, latents)
    scales = per_scale_distances(outs, target_pyr, backend)
    per_scale = [float(s.detach().mean()) for s in scales]
    if intermediate_supervision:
        loss = sum(scales).mean()
    else:
        loss = scales[-1].mean()
    return loss, per_scale


# -- data -------------------------------------------------------------------

@dataclass
class PairedData:
    """Conditioning and target pyramids for a whole dataset, plus stable item ids."""

    inputs: ImagePyramid
    targets: ImagePyramid
    items: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def batch(self, pos: Sequence[int]) -> tuple[ImagePyramid, ImagePyramid, list[int]]:
        idx = torch.as_tensor(np.asarray(pos), dtype=torch.long)
        return self.inputs.select(idx), self.targets.select(idx), [int(i) for i in self.items[np.asarray(pos)]]


def prepare_data(inputs: Tensor, targets: Tensor, cfg: CascadeConfig, items: Sequence[int] | None = None) -> PairedData:
    """Build conditioning/target pyramids for (N, C_in, h, w) inputs and (N, C, H, W) targets."""
    if targets.shape[-1] != cfg.resolution(cfg.K - 1):
        raise ConfigError(f"targets are {targets.shape[-1]}px but the cascade ends at {cfg.resolution(cfg.K - 1)}px")
    if inputs.shape[1] != cfg.in_ch or targets.shape[1] != cfg.out_ch:
        raise ConfigError(f"data has {inputs.shape[1]}->{targets.shape[1]} channels, "
                          f"cascade expects {cfg.in_ch}->{cfg.out_ch}")
    items = np.arange(len(targets)) if items is None else np.asarray(items)
    return PairedData(conditioning_pyramid(inputs, cfg.resolutions), build_pyramid(targets, cfg.K), items)


def select_all(net: CamNet, data: PairedData, tcfg: TrainConfig, epoch: int) -> SelectionRecord:
    """Selection over the whole dataset in chunks; results do not depend on chunking."""
    records = []
    for start in range(0, len(data), tcfg.select_chunk):
        pos = range(start, min(start + tcfg.select_chunk, len(data)))
        inp, tgt, items = data.batch(list(pos))
        if tcfg.hs:
            rec = hierarchical_select(net, inp, tgt, tcfg.m_per_stage, items, epoch, tcfg.seed,
                                      backend=tcfg.distance_backend)
        else:
            rec = vanilla_select(net, inp, tgt, tcfg.m_total, items, epoch, tcfg.seed,
                                 backend=tcfg.distance_backend)
        records.append(rec)
    return SelectionRecord(
        LatentPyramid.cat([r.latents for r in records]),
        np.concatenate([r.indices for r in records]),
        np.concatenate([r.distances for r in records]),
        epoch,
        sum(r.evaluations for r in records),
    )


# -- training ---------------------------------------------------------------

class JsonlLog:
    def __init__(self, path: str | Path | None = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    net: CamNet
    log: list[dict]
    selection: SelectionRecord | None
    initial_loss: float | None = None
    final_loss: float | None = None


def evaluate_objective(net: CamNet, data: PairedData, selection: SelectionRecord, tcfg: TrainConfig) -> float:
    """Dataset-mean objective for fixed selected latents (no gradient)."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(data), tcfg.select_chunk):
            pos = list(range(start, min(start + tcfg.select_chunk, len(data))))
            inp, tgt, _ = data.batch(pos)
            lat = selection.latents.select(torch.as_tensor(pos))
            loss, _ = cimle_objective(net, inp, tgt, lat, intermediate_supervision=tcfg.intermediate_supervision,
                                      backend=tcfg.distance_backend)
            total += float(loss) * len(pos)
    return total / len(data)


def train(data: PairedData, cascade_cfg: CascadeConfig, tcfg: TrainConfig, out_dir: str | Path | None = None,
          on_round: Callable[[CamNet, int], None] | None = None) -> TrainResult:
    """Alternate latent re-selection and mini-batch Adam on the cIMLE objective.

    Writes ``train.jsonl`` and a checkpoint per re-selection round into
    ``out_dir`` when given. ``on_round(net, epoch)`` runs after each round.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    cfg = effective_cascade(cascade_cfg, tcfg)
    if len(tcfg.m_per_stage) != cfg.K:
        raise ConfigError(f"m_per_stage has {len(tcfg.m_per_stage)} entries for K={cfg.K}")
    out = Path(out_dir) if out_dir is not None else None
    net = init_weights(cfg, tcfg.seed)
    jlog = JsonlLog(out / "train.jsonl" if out else None)
    opt = Adam(net.named_parameters_sorted(), tcfg.lr, (tcfg.beta1, tcfg.beta2), tcfg.eps)
    selection: SelectionRecord | None = None
    step = 0
    initial_loss = final_loss = None
    t0 = time.perf_counter()
    for epoch in range(tcfg.epochs):
        if epoch % tcfg.reselect_every == 0:
            net.eval()
            selection = select_all(net, data, tcfg, epoch)
            if initial_loss is None:
                initial_loss = evaluate_objective(net, data, selection, tcfg)
            jlog.write({"kind": "selection", "epoch": epoch,
                        "mean_stage_distance": selection.distances.mean(axis=0).tolist(),
                        "evaluations": selection.evaluations,
                        "wall_time": time.perf_counter() - t0})
        perm = np.random.default_rng(np.random.SeedSequence([tcfg.seed, STREAM_SHUFFLE, epoch])).permutation(len(data))
        net.train()
        for start in range(0, len(data), tcfg.batch_size):
            pos = perm[start:start + tcfg.batch_size]
            inp, tgt, _ = data.batch(pos)
            lat = selection.latents.select(torch.as_tensor(pos))
            loss, per_scale = cimle_objective(net, inp, tgt, lat, selection.epoch, epoch, tcfg.reselect_every,
                                              tcfg.intermediate_supervision, tcfg.distance_backend)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch})")
            loss.backward()
            opt.step()
            step += 1
            jlog.write({"kind": "step", "step": step, "epoch": epoch, "loss": float(loss.detach()),
                        "per_scale_losses": per_scale, "lr": tcfg.lr,
                        "wall_time": time.perf_counter() - t0})
        last_of_round = (epoch + 1) % tcfg.reselect_every == 0 or epoch == tcfg.epochs - 1
        if last_of_round:
            net.eval()
            if out is not None:
                save_checkpoint(out / f"ckpt_epoch{epoch + 1:04d}.camn", net, tcfg.seed, step)
            if on_round is not None:
                on_round(net, epoch)
        log.info("epoch %d done, step %d, loss %.4f", epoch, step, jlog.records[-1].get("loss", float("nan")))
    net.eval()
    if selection is not None:
        final_loss = evaluate_objective(net, data, select_all(net, data, tcfg, tcfg.epochs), tcfg)
    if out is not None:
        save_checkpoint(out / "ckpt_final.camn", net, tcfg.seed, step)
    return TrainResult(net, jlog.records, selection, initial_loss, final_loss)


# -- test time --------------------------------------------------------------

@torch.no_grad()
def test_sample(net: CamNet, input_pyr: ImagePyramid, count: int, seed: int = 0, items: Sequence[int] | None = None,
                round_: int = 0) -> list[Tensor]:
    """``count`` full-resolution outputs per input, latents drawn independently per module.

    Returns one (B, C, H, W) tensor per sample index.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    B = input_pyr.levels[0].shape[0]
    items = list(range(B)) if items is None else list(items)
    lat = sample_latents(net.cfg, seed, STREAM_TEST, round_, items, range(count))
    outs = net.cascade_forward(ImagePyramid([_repeat(t, count) for t in input_pyr.levels]), lat)
    final = outs[-1].reshape(B, count, *outs[-1].shape[1:])
    return [final[:, j] for j in range(count)]
