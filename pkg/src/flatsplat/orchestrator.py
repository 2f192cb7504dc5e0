"""Block-parallel training engine.

A run walks a schedule of phases: each epoch permutes the block ids, chunks
them into groups of at most ``n_workers`` and trains every group for
``period`` logical iterations. Inside one logical iteration all active blocks
render against the same decoder snapshot; their decoder gradients are then
reduced in ascending block-id order and applied in a single optimizer step, so
the number of threads never changes the result.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .decoder import (PARAM_NAMES, DecoderPair, DecoderParams, consistency_from_attributes, decode,
                      decoder_input_matrix, frustum_filter, momentum_update, pack_decoder,
                      unpack_decoder)
from .errors import ConfigError, ContractError, NumericsError, PartitionError
from .geometry import Camera
from .metrics import (SSIM_WINDOW, BlockMetricTracker, MetricReport, MetricsLog, l1_loss, psnr, ssim,
                      tracker_update)
from .renderer import EPS_TRANSMITTANCE, TAU_OPACITY, SplatBatch, composite
from .scene import AnchorSet, Block, Dataset
from .weighting import WeightingConfig, block_weights

MODES = ("full", "momentum_distill", "parallel_shared", "independent", "single_block")


@dataclass
class TrainConfig:
    n_blocks: int = 8
    n_workers: int = 4
    period: int = 50
    iterations: int = 2000
    mode: str = "full"
    seed: int = 0
    lambda_ssim: float = 0.2
    lambda_consistency: float = 50.0
    momentum: float = 0.9
    lr_decoder: float = 2e-3
    lr_feature: float = 5e-3
    lr_offset: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-15
    hidden: int = 64
    tracker_beta: float = 0.9
    grad_reduce: str = "sum"
    frustum_margin: float = 0.5
    shuffle: bool = True
    tau_opacity: float = TAU_OPACITY
    eps_transmittance: float = EPS_TRANSMITTANCE
    weighting: WeightingConfig = field(default_factory=WeightingConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 1 <= self.n_workers <= self.n_blocks:
            raise ConfigError("need 1 <= n_workers <= n_blocks")
        if self.period < 1:
            raise ConfigError("period must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.grad_reduce not in ("sum", "mean"):
            raise ConfigError("grad_reduce must be 'sum' or 'mean'")
        if self.mode == "single_block" and self.n_blocks != 1:
            raise ConfigError("single_block mode needs n_blocks == 1")

    @property
    def uses_teacher(self):
        return self.mode in ("full", "momentum_distill")

    @property
    def uses_weighting(self):
        return self.mode == "full"

    @property
    def shared_decoder(self):
        return self.mode != "independent"


# ---------------------------------------------------------------------------
# schedule


@dataclass
class Schedule:
    epoch: int
    groups: list[list[int]]
    period: int

    @property
    def iterations(self):
        return len(self.groups) * self.period


def chunk_groups(order, k: int) -> list[list[int]]:
    order = [int(b) for b in order]
    return [order[i:i + k] for i in range(0, len(order), k)]


def build_schedule(cfg: TrainConfig, epoch_index: int) -> Schedule:
    """Seeded block permutation for ``epoch_index`` split into groups of <= k."""
    if cfg.shuffle:
        order = np.random.default_rng([cfg.seed, 0x5C4ED, epoch_index]).permutation(cfg.n_blocks)
    else:
        order = np.arange(cfg.n_blocks)
    return Schedule(epoch_index, chunk_groups(order, cfg.n_workers), cfg.period)


def group_at(cfg: TrainConfig, iteration: int) -> list[int]:
    per_epoch = math.ceil(cfg.n_blocks / cfg.n_workers) * cfg.period
    epoch, rem = divmod(iteration, per_epoch)
    return build_schedule(cfg, epoch).groups[rem // cfg.period]


# ---------------------------------------------------------------------------
# per-block state


@dataclass
class BlockState:
    block: Block
    anchors: AnchorSet
    views: list[int]
    adam: dc.AdamState
    rng: np.random.Generator
    tracker: BlockMetricTracker
    weight: float = 1.0
    decoder: DecoderParams | None = None
    decoder_adam: dc.AdamState | None = None

    @property
    def id(self):
        return self.block.id


@dataclass
class BlockResult:
    block_id: int
    decoder_grads: dict
    anchor_grads: dict
    report: MetricReport
    weight: float
    loss_total: float
    loss_recon: float
    loss_consistency: float


def training_window(camera: Camera, block: Block):
    """Pixel box of the viewport that lies inside the block's extended region."""
    region = camera.viewport.intersection(block.extended)
    return None if region is None else camera.pixel_window(region)


def _window_ok(win):
    return win is not None and (win[1] - win[0]) >= SSIM_WINDOW and (win[3] - win[2]) >= SSIM_WINDOW


def block_loss(l1, ssim_value, consistency, cfg: TrainConfig, weight: float = 1.0):
    """``w * (L1 + lambda_ssim * (1 - SSIM)) + lambda_consistency * L_cons``.

    The block weight scales the reconstruction terms only. Returns
    ``(total, reconstruction)``; ``consistency`` may be None.
    """
    recon = dc.add(l1, dc.scale(dc.sub(1.0, ssim_value), cfg.lambda_ssim))
    total = dc.scale(recon, weight)
    if consistency is not None:
        total = dc.add(total, dc.scale(consistency, cfg.lambda_consistency))
    return total, recon


def build_splats(decoder: DecoderParams, features, offsets, anchors: AnchorSet, idx, block_id: int,
                 camera: Camera, diagonal: float):
    """Decode the anchors at ``idx`` for ``camera`` and lay them out as sorted splats.

    ``features``/``offsets`` are the block's full parameter arrays or Tensors.
    Returns the splats and the activated attributes.
    """
    n = len(idx)
    k = decoder.k_g
    pos = anchors.positions[idx]
    radius = anchors.base_radius[idx]
    feat = dc.take(features, idx)
    offs = dc.take(offsets, idx)
    attrs = decode(decoder, decoder_input_matrix(feat, pos, camera, diagonal), radius)
    means = dc.add(pos[:, None, :], dc.mul(offs, radius[:, None, None]))
    keys = np.stack([np.full(n * k, block_id), np.repeat(anchors.ids[idx], k), np.tile(np.arange(k), n)],
                    axis=1).astype(np.int64)
    splats = SplatBatch(dc.reshape(means, (n * k, 2)), dc.reshape(attrs.rotation, (n * k,)),
                        dc.reshape(attrs.scale, (n * k, 2)), dc.reshape(attrs.color, (n * k, 3)),
                        dc.reshape(attrs.opacity, (n * k,)), keys)
    return splats, attrs


# ---------------------------------------------------------------------------
# merged model


@dataclass
class MergedPiece:
    block_id: int
    anchors: AnchorSet
    decoder: DecoderParams


@dataclass
class MergedModel:
    pieces: list[MergedPiece]
    diagonal: float
    frustum_margin: float = 0.5
    tau_opacity: float = TAU_OPACITY
    eps_transmittance: float = EPS_TRANSMITTANCE

    @property
    def n_anchors(self):
        return sum(len(p.anchors) for p in self.pieces)

    def splats(self, camera: Camera) -> SplatBatch:
        parts = []
        for piece in sorted(self.pieces, key=lambda p: p.block_id):
            a = piece.anchors
            idx = frustum_filter(a.positions, camera, self.frustum_margin)
            if len(idx):
                parts.append(build_splats(piece.decoder, a.features, a.offsets, a, idx, piece.block_id,
                                          camera, self.diagonal)[0])
        if not parts:
            return SplatBatch.empty()
        if len(parts) == 1:
            return parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts], axis=0)  # noqa: E731
        return SplatBatch(cat("means"), cat("rotations"), cat("scales"), cat("colors"),
                          cat("opacities"), cat("keys"))

    def render(self, camera: Camera, window=None) -> np.ndarray:
        return composite(self.splats(camera), camera, window,
                         tau=self.tau_opacity, eps_t=self.eps_transmittance)


def merge(blocks: list[Block], anchors: dict[int, AnchorSet], decoder, *, diagonal: float,
          frustum_margin: float = 0.5, tau_opacity: float = TAU_OPACITY,
          eps_transmittance: float = EPS_TRANSMITTANCE) -> MergedModel:
    """Keep every anchor copy only in the block whose core owns its position.

    ``decoder`` is one shared DecoderParams or a per-block mapping.
    """
    owner: dict[int, int] = {}
    pieces = []
    for blk in sorted(blocks, key=lambda b: b.id):
        a = anchors[blk.id]
        keep = blk.owns(a.positions)
        for aid in a.ids[keep]:
            if int(aid) in owner:
                raise PartitionError(f"anchor {int(aid)} owned by blocks {owner[int(aid)]} and {blk.id}")
            owner[int(aid)] = blk.id
        dec = decoder[blk.id] if isinstance(decoder, dict) else decoder
        pieces.append(MergedPiece(blk.id, a.subset(keep), dec))
    return MergedModel(pieces, diagonal, frustum_margin, tau_opacity, eps_transmittance)


class GroundTruthModel:
    """Renders the synthetic scene itself; useful as an evaluation reference."""

    def __init__(self, scene):
        self.scene = scene

    def render(self, camera: Camera) -> np.ndarray:
        from .scene import render_ground_truth
        return render_ground_truth(self.scene, camera)


def evaluate(model, cameras: list[Camera], images: list[np.ndarray]) -> tuple[MetricReport, list[MetricReport]]:
    """Render each camera and compare with its reference image; returns (mean, per-view)."""
    reports = [MetricReport.compare(model.render(c), img) for c, img in zip(cameras, images)]
    return MetricReport.average(reports), reports


def boundary_lines(blocks: list[Block]) -> list[tuple[str, float]]:
    """Internal partition lines as ("x", value) / ("y", value)."""
    xs = sorted({b.core.x1 for b in blocks} - {max(b.core.x1 for b in blocks)})
    ys = sorted({b.core.y1 for b in blocks} - {max(b.core.y1 for b in blocks)})
    return [("x", x) for x in xs] + [("y", y) for y in ys]


def _edge_jump(img, axis, lo):
    if axis == "x":
        return float(np.mean(np.abs(img[:, lo + 1] - img[:, lo])))
    return float(np.mean(np.abs(img[lo + 1] - img[lo])))


def seam_discrepancy(model, blocks: list[Block], cameras: list[Camera], images: list[np.ndarray]) -> dict[str, float]:
    """Per internal boundary: mean over views that straddle it of
    ``| jump(render) - jump(ground truth) |``, where ``jump`` is the mean absolute
    difference between the pixel rows/columns on either side of the line."""
    out = {}
    for axis, val in boundary_lines(blocks):
        diffs = []
        for cam, gt in zip(cameras, images):
            p = cam.project([val, val])[0 if axis == "x" else 1]
            lo = int(np.ceil(p)) - 1
            size = cam.width if axis == "x" else cam.height
            if lo < 0 or lo + 1 >= size:
                continue
            img = model.render(cam)
            diffs.append(abs(_edge_jump(img, axis, lo) - _edge_jump(gt, axis, lo)))
        if diffs:
            out[f"{axis}={val:g}"] = float(np.mean(diffs))
    return out


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, anchors: dict[int, AnchorSet], *, threads: int = 1):
        if len(dataset.blocks) != cfg.n_blocks:
            raise ConfigError(f"config expects {cfg.n_blocks} blocks, dataset has {len(dataset.blocks)}")
        self.cfg = cfg
        self.dataset = dataset
        self.threads = max(1, int(threads))
        self.diagonal = dataset.domain.diagonal
        self.iteration = 0
        k_g = next(iter(anchors.values())).k_g
        init = DecoderParams.init(np.random.default_rng([cfg.seed, 0xDEC]), k_g, cfg.hidden)
        self.pair = DecoderPair.from_student(init.copy(), cfg.momentum)
        self.student_adam = self._decoder_adam()
        self.blocks: dict[int, BlockState] = {}
        for blk in dataset.blocks:
            views = [v for v in dataset.assignments[blk.id]
                     if _window_ok(training_window(dataset.cameras[v], blk))]
            if not views:
                raise PartitionError(f"block {blk.id} has no usable training view")
            st = BlockState(
                block=blk,
                anchors=anchors[blk.id],
                views=views,
                adam=dc.AdamState({"feat": cfg.lr_feature, "offs": cfg.lr_offset},
                                  cfg.beta1, cfg.beta2, cfg.eps_adam),
                rng=np.random.default_rng([cfg.seed, 0x7E11, blk.id]),
                tracker=BlockMetricTracker(blk.id, cfg.tracker_beta),
            )
            if not cfg.shared_decoder:
                st.decoder = init.copy()
                st.decoder_adam = self._decoder_adam()
            self.blocks[blk.id] = st

    def _decoder_adam(self):
        c = self.cfg
        return dc.AdamState(c.lr_decoder, c.beta1, c.beta2, c.eps_adam)

    # -- one block -------------------------------------------------------

    def _block_step(self, st: BlockState) -> BlockResult:
        try:
            return self._block_step_inner(st)
        except NumericsError as exc:
            if exc.block_id is None:
                raise NumericsError(f"block {st.id}: {exc}", block_id=st.id) from exc
            raise

    def _block_step_inner(self, st: BlockState) -> BlockResult:
        cfg = self.cfg
        cam_id = st.views[int(st.rng.integers(len(st.views)))]
        cam = self.dataset.cameras[cam_id]
        win = training_window(cam, st.block)
        x0, x1, y0, y1 = win
        gt = self.dataset.images[cam_id][y0:y1, x0:x1]

        tape = dc.Tape()
        dec_src = st.decoder if st.decoder is not None else self.pair.student
        dec = dec_src.on_tape(tape)
        feat = tape.param("feat", st.anchors.features)
        offs = tape.param("offs", st.anchors.offsets)
        idx = frustum_filter(st.anchors.positions, cam, cfg.frustum_margin)
        splats, attrs = build_splats(dec, feat, offs, st.anchors, idx, st.id, cam, self.diagonal)
        img = composite(splats, cam, win, tau=cfg.tau_opacity, eps_t=cfg.eps_transmittance)

        l1 = l1_loss(img, gt)
        sim = ssim(img, gt)
        cons = None
        if cfg.uses_teacher and len(idx):
            t_attr = decode(self.pair.teacher, decoder_input_matrix(
                st.anchors.features[idx], st.anchors.positions[idx], cam, self.diagonal),
                st.anchors.base_radius[idx])
            cons = consistency_from_attributes(attrs, t_attr)
        loss, recon = block_loss(l1, sim, cons, cfg, st.weight)
        cons_val = 0.0 if cons is None else float(dc.value(cons))
        total = float(dc.value(loss))
        if not math.isfinite(total):
            raise NumericsError(f"non-finite loss in block {st.id}", block_id=st.id)

        if isinstance(loss, dc.Tensor):
            grads = tape.backward(loss)
        else:  # nothing visible: the loss does not depend on any parameter
            grads = {name: np.zeros_like(t.data) for name, t in tape.slots.items()}
        report = MetricReport(psnr(dc.value(img), gt), float(dc.value(sim)), float(dc.value(l1)))
        return BlockResult(
            st.id,
            {n: grads["dec." + n] for n in PARAM_NAMES},
            {"feat": grads["feat"], "offs": grads["offs"]},
            report, st.weight, total, float(dc.value(recon)), cons_val,
        )

    # -- one logical iteration ---------------------------------------------

    def train_iteration(self, group: list[int] | None = None) -> list[dict]:
        cfg = self.cfg
        group = sorted(group_at(cfg, self.iteration) if group is None else group)
        states = [self.blocks[b] for b in group]
        if self.threads > 1 and len(states) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(states))) as pool:
                results = list(pool.map(self._block_step, states))
        else:
            results = [self._block_step(st) for st in states]

        # barrier: all mutation below happens on the coordinating thread
        if cfg.shared_decoder:
            total = {n: np.zeros_like(v) for n, v in self.pair.student.arrays().items()}
            for res in results:  # ascending block id
                for n in PARAM_NAMES:
                    total[n] += res.decoder_grads[n]
            if cfg.grad_reduce == "mean":
                total = {n: g / len(results) for n, g in total.items()}
            dc.adam_step(self.student_adam, self.pair.student.arrays(), total)
        for st, res in zip(states, results):
            if not cfg.shared_decoder:
                dc.adam_step(st.decoder_adam, st.decoder.arrays(), res.decoder_grads)
            dc.adam_step(st.adam, {"feat": st.anchors.features, "offs": st.anchors.offsets}, res.anchor_grads)
        if cfg.uses_teacher:
            momentum_update(self.pair)
        for st, res in zip(states, results):
            tracker_update(st.tracker, res.report)
        if cfg.uses_weighting:
            for b, w in block_weights([st.tracker for st in self.blocks.values()], cfg.weighting).items():
                self.blocks[b].weight = w

        rows = [{
            "iter": self.iteration, "block": res.block_id, "psnr": res.report.psnr,
            "ssim": res.report.ssim, "l1": res.report.l1,
            "psnr_ema": self.blocks[res.block_id].tracker.psnr_ema,
            "ssim_ema": self.blocks[res.block_id].tracker.ssim_ema,
            "weight": res.weight, "loss_total": res.loss_total, "loss_recon": res.loss_recon,
            "loss_consistency": res.loss_consistency,
        } for res in results]
        self.iteration += 1
        return rows

    # -- outputs -----------------------------------------------------------

    def decoders(self):
        if self.cfg.shared_decoder:
            return self.pair.student
        return {b: st.decoder for b, st in self.blocks.items()}

    def merged(self) -> MergedModel:
        return merge([st.block for st in self.blocks.values()],
                     {b: st.anchors for b, st in self.blocks.items()}, self.decoders(),
                     diagonal=self.diagonal, frustum_margin=self.cfg.frustum_margin,
                     tau_opacity=self.cfg.tau_opacity, eps_transmittance=self.cfg.eps_transmittance)

    def block_model(self, block_id: int) -> MergedModel:
        """All anchors of one block (extended region included) as a renderable model."""
        st = self.blocks[block_id]
        dec = st.decoder if st.decoder is not None else self.pair.student
        return MergedModel([MergedPiece(block_id, st.anchors, dec)], self.diagonal, self.cfg.frustum_margin,
                           self.cfg.tau_opacity, self.cfg.eps_transmittance)

    # -- checkpoint --------------------------------------------------------

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self)

    def load_bytes(self, buf: bytes):
        decode_checkpoint_into(self, buf)


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: magic(8) | version u32 | header length u64 | JSON header | payload
# The header lists payload sections (offset, nbytes, shape); arrays are
# little-endian float64, decoders use the decoder blob format.

_CKPT_MAGIC = b"FSPLTCKP"
_CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


class _Writer:
    def __init__(self):
        self.chunks, self.sections, self.size = [], [], 0

    def add(self, name, data: bytes, kind, shape=None):
        self.sections.append({"name": name, "kind": kind, "offset": self.size, "nbytes": len(data),
                              "shape": list(shape) if shape is not None else None})
        self.chunks.append(data)
        self.size += len(data)

    def array(self, name, arr):
        arr = np.asarray(arr)
        self.add(name, np.ascontiguousarray(arr, dtype="<f8").tobytes(), "f64", arr.shape)

    def adam(self, prefix, st: dc.AdamState):
        for key in sorted(st.m):
            self.array(f"{prefix}.m.{key}", st.m[key])
            self.array(f"{prefix}.v.{key}", st.v[key])


def encode_checkpoint(tr: Trainer) -> bytes:
    w = _Writer()
    w.add("student", pack_decoder(tr.pair.student), "decoder")
    w.add("teacher", pack_decoder(tr.pair.teacher), "decoder")
    w.adam("student_adam", tr.student_adam)
    blocks_meta = []
    for b in sorted(tr.blocks):
        st = tr.blocks[b]
        a = st.anchors
        w.array(f"block{b}.positions", a.positions)
        w.array(f"block{b}.features", a.features)
        w.array(f"block{b}.offsets", a.offsets)
        w.array(f"block{b}.base_radius", a.base_radius)
        w.adam(f"block{b}.adam", st.adam)
        if st.decoder is not None:
            w.add(f"block{b}.decoder", pack_decoder(st.decoder), "decoder")
            w.adam(f"block{b}.decoder_adam", st.decoder_adam)
        blocks_meta.append({
            "id": b, "anchor_ids": [int(i) for i in a.ids], "views": st.views,
            "rng": st.rng.bit_generator.state, "tracker": st.tracker.to_dict(), "weight": st.weight,
            "adam_step": st.adam.step,
            "decoder_adam_step": st.decoder_adam.step if st.decoder_adam is not None else None,
        })
    header = {
        "iteration": tr.iteration,
        "config": _config_dict(tr.cfg),
        "student_adam_step": tr.student_adam.step,
        "blocks": blocks_meta,
        "sections": w.sections,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return _CKPT_PREFIX.pack(_CKPT_MAGIC, _CKPT_VERSION, len(hb)) + hb + b"".join(w.chunks)


def _config_dict(cfg: TrainConfig):
    return asdict(cfg)


def read_checkpoint(buf: bytes) -> tuple[dict, dict]:
    """Parse a checkpoint into (header, sections) where sections maps name -> array/decoder."""
    magic, version, hlen = _CKPT_PREFIX.unpack_from(buf, 0)
    if magic != _CKPT_MAGIC:
        raise ContractError("not a checkpoint file")
    if version != _CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    start = _CKPT_PREFIX.size
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    sections = {}
    for s in header["sections"]:
        raw = buf[base + s["offset"]: base + s["offset"] + s["nbytes"]]
        if s["kind"] == "decoder":
            sections[s["name"]] = unpack_decoder(raw)[0]
        else:
            sections[s["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(s["shape"])
    return header, sections


def _restore_adam(st: dc.AdamState, prefix, sections, step):
    st.step = step
    st.m, st.v = {}, {}
    for name, arr in sections.items():
        if name.startswith(prefix + ".m."):
            st.m[name[len(prefix) + 3:]] = arr.copy()
        elif name.startswith(prefix + ".v."):
            st.v[name[len(prefix) + 3:]] = arr.copy()


def decode_checkpoint_into(tr: Trainer, buf: bytes):
    header, sec = read_checkpoint(buf)
    tr.iteration = int(header["iteration"])
    for n in PARAM_NAMES:
        getattr(tr.pair.student, n)[...] = getattr(sec["student"], n)
        getattr(tr.pair.teacher, n)[...] = getattr(sec["teacher"], n)
    _restore_adam(tr.student_adam, "student_adam", sec, header["student_adam_step"])
    for meta in header["blocks"]:
        b = int(meta["id"])
        st = tr.blocks[b]
        st.anchors = AnchorSet(np.asarray(meta["anchor_ids"], dtype=np.int64), sec[f"block{b}.positions"].copy(),
                               sec[f"block{b}.features"].copy(), sec[f"block{b}.offsets"].copy(),
                               sec[f"block{b}.base_radius"].copy())
        st.views = list(meta["views"])
        st.rng.bit_generator.state = meta["rng"]
        st.tracker = BlockMetricTracker.from_dict(meta["tracker"])
        st.weight = float(meta["weight"])
        _restore_adam(st.adam, f"block{b}.adam", sec, meta["adam_step"])
        if st.decoder is not None:
            st.decoder = sec[f"block{b}.decoder"].copy()
            _restore_adam(st.decoder_adam, f"block{b}.decoder_adam", sec, meta["decoder_adam_step"])


# ---------------------------------------------------------------------------
# run loop


@dataclass
class RunResult:
    trainer: Trainer
    checkpoints: list[Path]
    metrics_csv: Path


def run(cfg: TrainConfig, dataset: Dataset, anchors: dict[int, AnchorSet], out_dir, *,
        checkpoint_every: int = 500, threads: int = 1, resume=None, progress=None) -> RunResult:
    """Train until ``cfg.iterations`` logical iterations have run.

    Writes ``metrics.csv`` and ``checkpoints/ckpt_XXXXXX.bin`` (initial, every
    ``checkpoint_every`` iterations, and final) under ``out_dir``.
    """
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    try:
        ck_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {ck_dir}: {exc}") from exc
    tr = Trainer(cfg, dataset, anchors, threads=threads)
    if resume is not None:
        tr.load_bytes(Path(resume).read_bytes())
    log = MetricsLog(out / "metrics.csv", resume_from=tr.iteration if resume is not None else None)
    written = []

    def save():
        path = ck_dir / f"ckpt_{tr.iteration:06d}.bin"
        path.write_bytes(tr.to_bytes())
        written.append(path)

    if resume is None:
        save()
    while tr.iteration < cfg.iterations:
        log.append(tr.train_iteration())
        if progress is not None:
            progress(tr)
        if tr.iteration % checkpoint_every == 0 or tr.iteration == cfg.iterations:
            save()
    return RunResult(tr, written, out / "metrics.csv")


# ---------------------------------------------------------------------------
# merged checkpoints
#
# Same container as training checkpoints (magic, version, JSON header,
# payload) with header kind "merged": one anchor set and decoder per block.

_MERGED_KIND = "merged"


def encode_merged(model: MergedModel) -> bytes:
    w = _Writer()
    pieces = []
    for p in sorted(model.pieces, key=lambda q: q.block_id):
        b = p.block_id
        w.array(f"piece{b}.positions", p.anchors.positions)
        w.array(f"piece{b}.features", p.anchors.features)
        w.array(f"piece{b}.offsets", p.anchors.offsets.reshape(len(p.anchors), -1, 2))
        w.array(f"piece{b}.base_radius", p.anchors.base_radius)
        w.add(f"piece{b}.decoder", pack_decoder(p.decoder), "decoder")
        pieces.append({"block": b, "anchor_ids": [int(i) for i in p.anchors.ids]})
    header = {"kind": _MERGED_KIND, "diagonal": model.diagonal, "frustum_margin": model.frustum_margin,
              "tau_opacity": model.tau_opacity, "eps_transmittance": model.eps_transmittance,
              "pieces": pieces, "sections": w.sections}
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return _CKPT_PREFIX.pack(_CKPT_MAGIC, _CKPT_VERSION, len(hb)) + hb + b"".join(w.chunks)


def _piece_anchors(sec, prefix, ids):
    return AnchorSet(np.asarray(ids, dtype=np.int64), sec[f"{prefix}.positions"].copy(),
                     sec[f"{prefix}.features"].copy(), sec[f"{prefix}.offsets"].copy(),
                     sec[f"{prefix}.base_radius"].copy())


def load_model(buf: bytes, blocks: list[Block] | None = None, diagonal: float | None = None) -> MergedModel:
    """Renderable model from a merged checkpoint, or from a training checkpoint
    (which needs the partition ``blocks`` and scene ``diagonal`` to merge)."""
    header, sec = read_checkpoint(buf)
    if header.get("kind") == _MERGED_KIND:
        pieces = [MergedPiece(int(p["block"]), _piece_anchors(sec, f"piece{p['block']}", p["anchor_ids"]),
                              sec[f"piece{p['block']}.decoder"]) for p in header["pieces"]]
        return MergedModel(pieces, float(header["diagonal"]), float(header["frustum_margin"]),
                           float(header["tau_opacity"]), float(header["eps_transmittance"]))
    if blocks is None or diagonal is None:
        raise ContractError("a training checkpoint needs the partition and scene diagonal to merge")
    cfg = header["config"]
    anchors, decoders = {}, {}
    for meta in header["blocks"]:
        b = int(meta["id"])
        anchors[b] = _piece_anchors(sec, f"block{b}", meta["anchor_ids"])
        decoders[b] = sec.get(f"block{b}.decoder", sec["student"])
    if {b.id for b in blocks} != set(anchors):
        raise PartitionError("checkpoint blocks do not match the partition")
    return merge(blocks, anchors, decoders, diagonal=diagonal, frustum_margin=float(cfg["frustum_margin"]),
                 tau_opacity=float(cfg["tau_opacity"]), eps_transmittance=float(cfg["eps_transmittance"]))
