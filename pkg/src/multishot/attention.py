"""Masked multi-head attention and a small camera-conditioned transformer stack.

Everything here is plain NumPy with hand-written backward passes so gradients
can be checked against finite differences. Masked keys are removed from the
softmax (their logits become ``-inf`` before the max-shifted exponential), so
their attention weight is exactly zero rather than merely small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .camera import CameraExtrinsics, CameraIntrinsics, CameraPose, plucker_map
from .conditioning import ConvBranch, MlpBranch, inject
from .errors import DomainError
from .shot_mask import AttentionMask, ShotSpec, TokenLayout, build_mask, mask_for_layer

RMS_EPS = 1e-6


@dataclass
class AttentionParams:
    n_heads: int
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray

    NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.n_heads:
            raise DomainError(f"d_model={d} is not divisible by n_heads={self.n_heads}")
        for name in self.NAMES:
            want = (d,) if name.startswith("b") else (d, d)
            if getattr(self, name).shape != want:
                raise DomainError(f"{name} has shape {getattr(self, name).shape}, expected {want}")

    @classmethod
    def init(cls, d_model: int, n_heads: int, *, seed: int, dtype=np.float64):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(d_model)
        arrays = {}
        for name in cls.NAMES:
            shape = (d_model,) if name.startswith("b") else (d_model, d_model)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        return cls(n_heads, **arrays)

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def masked_softmax(logits: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Row softmax over visible entries only; hidden entries get weight 0.0."""
    masked = np.where(bits, logits, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(params: AttentionParams, x: np.ndarray, bits: np.ndarray):
    n = x.shape[0]
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DomainError(f"input {x.shape} does not match d_model={params.d_model}")
    if bits.shape != (n, n):
        raise DomainError(f"mask is {bits.shape[0]}x{bits.shape[1]}, input has {n} tokens")
    H = params.n_heads
    q = _split_heads(x @ params.wq.T + params.bq, H)
    k = _split_heads(x @ params.wk.T + params.bk, H)
    v = _split_heads(x @ params.wv.T + params.bv, H)
    scale = 1.0 / math.sqrt(params.d_head)
    probs = masked_softmax(q @ k.transpose(0, 2, 1) * scale, bits[None])
    o = _merge_heads(probs @ v)
    out = o @ params.wo.T + params.bo
    return out, (x, q, k, v, probs, o)


def attention_backward(params: AttentionParams, cache, grad_out: np.ndarray):
    """Returns ``(param_grads, grad_input)``."""
    x, q, k, v, probs, o = cache
    H = params.n_heads
    scale = 1.0 / math.sqrt(params.d_head)
    g = {"wo": grad_out.T @ o, "bo": grad_out.sum(axis=0)}
    do = _split_heads(grad_out @ params.wo, H)
    dprobs = do @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ do
    dlogits = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
    dq = dlogits @ k * scale
    dk = dlogits.transpose(0, 2, 1) @ q * scale
    dx = np.zeros_like(x)
    for name, d in (("q", dq), ("k", dk), ("v", dv)):
        d = _merge_heads(d)
        g["w" + name] = d.T @ x
        g["b" + name] = d.sum(axis=0)
        dx += d @ getattr(params, "w" + name)
    return {name: g[name] for name in AttentionParams.NAMES}, dx


def masked_attention(params: AttentionParams, x: np.ndarray, mask: AttentionMask) -> np.ndarray:
    if mask.n != x.shape[0]:
        raise DomainError(f"mask covers {mask.n} tokens, input has {x.shape[0]}")
    return attention_forward(params, x, mask.bits)[0]


def attention_weights(params: AttentionParams, x: np.ndarray, mask: AttentionMask) -> np.ndarray:
    """Per-head attention probabilities, shape (n_heads, n, n)."""
    return attention_forward(params, x, mask.bits)[1][4]


def rms_norm(x: np.ndarray, gain: np.ndarray):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    return x / r * gain, (x, r)


def rms_norm_backward(gain: np.ndarray, cache, grad_out: np.ndarray):
    x, r = cache
    d = x.shape[-1]
    ggain = np.sum(grad_out * x / r, axis=0)
    gy = grad_out * gain
    dx = gy / r - x * np.sum(gy * x, axis=-1, keepdims=True) / (d * r**3)
    return ggain, dx


# -- stacked block --------------------------------------------------------------------

@dataclass(frozen=True)
class BlockConfig:
    layers: int = 4
    full_visibility_layers: int = 2
    use_mask: bool = True
    use_extrinsic_branch: bool = True
    use_plucker_branch: bool = True
    d_model: int = 64
    n_heads: int = 4
    conv_kernel: int = 2
    conv_depth: int = 1
    mlp_hidden: int | None = None
    residual: bool = False
    center_sampling: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise DomainError("layers must be at least 1")
        if not 0 <= self.full_visibility_layers <= self.layers:
            raise DomainError(
                f"full_visibility_layers={self.full_visibility_layers} must lie in [0, {self.layers}]"
            )
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise DomainError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.conv_kernel < 1 or self.conv_depth < 1:
            raise DomainError("conv_kernel and conv_depth must be positive")


@dataclass
class ToyTransformer:
    """Camera injection followed by ``config.layers`` masked attention layers.

    With ``config.residual`` each layer is ``x + attn(rms_norm(x))``;
    otherwise it is just ``attn(x)``.
    """

    config: BlockConfig
    mlp: MlpBranch
    conv: ConvBranch
    layers: list[AttentionParams]
    gains: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, config: BlockConfig, dtype=np.float64) -> "ToyTransformer":
        seeds = np.random.SeedSequence(config.seed).generate_state(config.layers + 2)
        d = config.d_model
        return cls(
            config,
            MlpBranch.init(d, config.mlp_hidden, seed=int(seeds[0]), dtype=dtype),
            ConvBranch.init(d, config.conv_kernel, seed=int(seeds[1]), depth=config.conv_depth, dtype=dtype),
            [AttentionParams.init(d, config.n_heads, seed=int(s), dtype=dtype) for s in seeds[2:]],
            [np.ones(d, dtype=dtype) for _ in range(config.layers)],
        )

    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        if self.config.use_extrinsic_branch:
            out.update({f"mlp.{k}": v for k, v in self.mlp.params().items()})
        if self.config.use_plucker_branch:
            out.update({f"conv.{k}": v for k, v in self.conv.params().items()})
        for i, p in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in p.params().items()})
            if self.config.residual:
                out[f"layer{i}.gain"] = self.gains[i]
        return out

    # camera features ------------------------------------------------------------

    def _frame_poses(self, layout: TokenLayout, poses: Sequence[Sequence[CameraPose]]):
        if len(poses) != len(layout.shots):
            raise DomainError(f"layout has {len(layout.shots)} shots but {len(poses)} pose trajectories")
        out = []
        for shot, traj in zip(layout.shots, poses):
            if len(traj) == 1:
                out.extend([traj[0]] * shot.n_frames)
            elif len(traj) == shot.n_frames:
                out.extend(traj)
            else:
                raise DomainError(
                    f"shot {shot.shot_id} spans {shot.n_frames} frames but has {len(traj)} poses"
                )
        return out

    def plucker_inputs(self, layout: TokenLayout, frame_poses: Sequence[CameraPose]) -> np.ndarray:
        k = self.config.conv_kernel
        h, w = layout.patch_h * k, layout.patch_w * k
        maps = [plucker_map(p, h, w, center=self.config.center_sampling).data for p in frame_poses]
        return np.stack(maps)

    def forward(self, layout: TokenLayout, z: np.ndarray, text: np.ndarray, poses):
        """Returns ``(output, cache)``; ``output`` is (n_tokens, d_model)."""
        cfg = self.config
        d = cfg.d_model
        if z.shape != (layout.n_visual, d):
            raise DomainError(f"visual tokens {z.shape} do not match layout ({layout.n_visual}, {d})")
        if text.shape != (layout.n_text, d):
            raise DomainError(f"text tokens {text.shape} do not match layout ({layout.n_text}, {d})")
        frame_poses = self._frame_poses(layout, poses)
        tpf = layout.tokens_per_frame
        cache = {"layout": layout}

        if cfg.use_extrinsic_branch:
            flat = np.stack([p.extrinsics.flatten() for p in frame_poses])
            ext, cache["mlp"] = self.mlp.forward(flat)
            c_ext = np.repeat(ext, tpf, axis=0)
        else:
            c_ext = np.zeros_like(z)
        if cfg.use_plucker_branch:
            plk, cache["conv"] = self.conv.forward(self.plucker_inputs(layout, frame_poses))
            c_plk = plk.reshape(layout.n_visual, d)
        else:
            c_plk = np.zeros_like(z)

        x = np.concatenate([text, inject(z, c_ext, c_plk)], axis=0)
        base = build_mask(layout) if cfg.use_mask else AttentionMask.full(layout.n_tokens)
        layer_caches = []
        for i, params in enumerate(self.layers):
            bits = mask_for_layer(base, i, cfg.full_visibility_layers).bits
            if cfg.residual:
                h, ncache = rms_norm(x, self.gains[i])
                y, acache = attention_forward(params, h, bits)
                x = x + y
            else:
                ncache = None
                x, acache = attention_forward(params, x, bits)
            layer_caches.append((ncache, acache))
        cache["layers"] = layer_caches
        return x, cache

    def backward(self, cache, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        cfg = self.config
        layout: TokenLayout = cache["layout"]
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            ncache, acache = cache["layers"][i]
            pg, gx = attention_backward(self.layers[i], acache, g)
            grads.update({f"layer{i}.{k}": v for k, v in pg.items()})
            if cfg.residual:
                ggain, gx = rms_norm_backward(self.gains[i], ncache, gx)
                grads[f"layer{i}.gain"] = ggain
                g = g + gx
            else:
                g = gx
        gz = g[layout.n_text:]
        tpf = layout.tokens_per_frame
        if cfg.use_extrinsic_branch:
            gext = gz.reshape(layout.frames, tpf, cfg.d_model).sum(axis=1)
            grads.update({f"mlp.{k}": v for k, v in self.mlp.backward(cache["mlp"], gext).items()})
        if cfg.use_plucker_branch:
            gplk = gz.reshape(layout.frames, layout.patch_h, layout.patch_w, cfg.d_model)
            grads.update({f"conv.{k}": v for k, v in self.conv.backward(cache["conv"], gplk).items()})
        grads["input.text"] = g[: layout.n_text]
        grads["input.z"] = gz
        return grads


def block_forward(model: ToyTransformer, layout: TokenLayout, z, text, poses) -> np.ndarray:
    return model.forward(layout, np.asarray(z), np.asarray(text), poses)[0]


def layer_mask_densities(config: BlockConfig, layout: TokenLayout) -> list[float]:
    base = build_mask(layout) if config.use_mask else AttentionMask.full(layout.n_tokens)
    return [
        float(mask_for_layer(base, i, config.full_visibility_layers).bits.mean())
        for i in range(config.layers)
    ]


def leakage_probe(
    model: ToyTransformer,
    layout: TokenLayout,
    z: np.ndarray,
    text: np.ndarray,
    poses,
    visual_index: int,
    epsilon: float,
) -> np.ndarray:
    """Max absolute output change per token after nudging one visual token.

    ``visual_index`` indexes rows of ``z``; it may not lie in frame 0, whose
    tokens are visible to every shot by construction.
    """
    if not 0 <= visual_index < layout.n_visual:
        raise DomainError(f"visual index {visual_index} out of range [0, {layout.n_visual})")
    if visual_index < layout.tokens_per_frame:
        raise DomainError(f"visual token {visual_index} is in frame 0, which every shot can see")
    base = block_forward(model, layout, z, text, poses)
    z2 = np.array(z, copy=True)
    z2[visual_index] += epsilon
    moved = block_forward(model, layout, z2, text, poses)
    return np.max(np.abs(moved - base), axis=1)


# -- training -------------------------------------------------------------------------

def descend(
    loss_and_grad: Callable[[], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    steps: int,
    lr: float,
) -> list[float]:
    """Plain gradient descent, updating ``params`` in place.

    Returns the loss evaluated before each update.
    """
    if steps < 1:
        raise DomainError("steps must be at least 1")
    trace = []
    for step in range(steps):
        loss, grads = loss_and_grad()
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss {loss} at step {step}")
        trace.append(float(loss))
        for name, p in params.items():
            p -= lr * grads[name]
    return trace


def mse_loss_and_grad(model: ToyTransformer, layout, z, text, poses, target):
    out, cache = model.forward(layout, z, text, poses)
    diff = out - target
    loss = float(np.mean(diff * diff))
    grads = model.backward(cache, 2.0 * diff / diff.size)
    return loss, grads


@dataclass
class SyntheticBatch:
    z: np.ndarray
    text: np.ndarray
    poses: list[list[CameraPose]]
    target: np.ndarray


def orbit_trajectory(n_frames: int, *, radius: float, start_angle: float, step: float,
                     intrinsics, first_frame: int = 0) -> list[CameraPose]:
    """Cameras on a horizontal circle looking at the origin."""
    poses = []
    for i in range(n_frames):
        a = start_angle + i * step
        center = np.array([radius * math.sin(a), 0.0, -radius * math.cos(a)])
        forward = -center / np.linalg.norm(center)
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(up, forward)
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward], axis=1)
        poses.append(CameraPose(intrinsics, CameraExtrinsics(R, center), first_frame + i))
    return poses


def synthetic_batch(config: BlockConfig, layout: TokenLayout, seed: int) -> SyntheticBatch:
    rng = np.random.default_rng(seed)
    d = config.d_model
    k = config.conv_kernel
    width, height = layout.patch_w * k * 8, layout.patch_h * k * 8
    intr = CameraIntrinsics(float(width), float(width), width / 2.0, height / 2.0, width, height)
    poses = []
    for shot in layout.shots:
        poses.append(
            orbit_trajectory(
                shot.n_frames, radius=float(rng.uniform(2.0, 4.0)),
                start_angle=float(rng.uniform(-math.pi, math.pi)), step=0.05,
                intrinsics=intr, first_frame=shot.frame_start,
            )
        )
    z = rng.standard_normal((layout.n_visual, d))
    text = rng.standard_normal((layout.n_text, d))
    # target: output of a differently-seeded teacher, so it is reachable in principle
    teacher = ToyTransformer.init(replace(config, seed=config.seed + 1))
    teacher.mlp.w2[...] = rng.uniform(-0.1, 0.1, teacher.mlp.w2.shape)
    target = teacher.forward(layout, z, text, poses)[0]
    return SyntheticBatch(z, text, poses, target)


def demo_layout() -> TokenLayout:
    """Three shots over six 2x2-patch frames with global and per-shot text."""
    return TokenLayout(
        frames=6, patch_h=2, patch_w=2,
        shots=(ShotSpec(0, 0, 2, 3, 5), ShotSpec(1, 2, 4, 5, 7), ShotSpec(2, 4, 6, 7, 9)),
        global_text_start=0, global_text_end=3,
    )


def train_demo(
    config: BlockConfig,
    layout: TokenLayout,
    target: np.ndarray | None = None,
    steps: int = 200,
    lr: float = 0.2,
    seed: int = 0,
) -> list[float]:
    """Fit a fresh model to a synthetic target by full-batch gradient descent."""
    model = ToyTransformer.init(config)
    batch = synthetic_batch(config, layout, seed)
    if target is None:
        target = batch.target
    if target.shape != (layout.n_tokens, config.d_model):
        raise DomainError(f"target {target.shape} does not match ({layout.n_tokens}, {config.d_model})")
    params = model.named_params()
    return descend(
        lambda: mse_loss_and_grad(model, layout, batch.z, batch.text, batch.poses, target),
        params, steps, lr,
    )


# -- gradient checking ----------------------------------------------------------------

GRAD_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)``.

    The floor keeps structurally-zero gradients (e.g. key biases, which
    softmax ignores) from turning finite-difference round-off into a
    relative error of 1.
    """
    num = float(np.max(np.abs(analytic - numeric), initial=0.0))
    den = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return num / den


def numeric_grad(f: Callable[[], float], p: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``p`` (mutated and restored)."""
    g = np.zeros_like(p)
    flat, gflat = p.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


GRADCHECK_CONFIG = BlockConfig(
    layers=2, full_visibility_layers=1, d_model=4, n_heads=2, conv_kernel=1, mlp_hidden=4
)


def gradcheck_layout() -> TokenLayout:
    return TokenLayout(
        frames=3, patch_h=1, patch_w=2,
        shots=(ShotSpec(0, 0, 2, 2, 3), ShotSpec(1, 2, 3, 3, 4)),
        global_text_start=0, global_text_end=2,
    )


def gradcheck(seed: int, config: BlockConfig | None = None, layout: TokenLayout | None = None,
              step: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per parameter tensor.

    The transfer layer is randomized first; at its zero initialization the
    first MLP layer receives no gradient and would be checked only trivially.
    """
    config = replace(config or GRADCHECK_CONFIG, seed=seed)
    layout = layout or gradcheck_layout()
    model = ToyTransformer.init(config)
    rng = np.random.default_rng(seed + 1)
    model.mlp.w2[...] = rng.uniform(-0.5, 0.5, model.mlp.w2.shape)
    model.mlp.b2[...] = rng.uniform(-0.5, 0.5, model.mlp.b2.shape)
    batch = synthetic_batch(config, layout, seed)

    def loss() -> float:
        out = model.forward(layout, batch.z, batch.text, batch.poses)[0]
        return float(np.mean((out - batch.target) ** 2))

    _, grads = mse_loss_and_grad(model, layout, batch.z, batch.text, batch.poses, batch.target)
    return {
        name: relative_error(grads[name], numeric_grad(loss, p, step))
        for name, p in model.named_params().items()
    }
