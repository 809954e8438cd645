"""A small two-branch v-prediction denoiser with hand-written gradients.

The network is deliberately tiny (about 10^4 parameters): two 3x3 conv
blocks, one cross-domain attention block coupling the depth and normal
branches, then two more conv blocks. Both branches share all weights; they
are distinguished only by the switcher embedding added to the conditioning
vector (time + switcher + scene), which is injected as a per-channel bias
before every activation. Everything runs in float64 numpy with an explicit
backward pass, so gradients can be checked against central finite
differences to near machine precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..synthetic import height_field, normals_from_gradients
from .core import (
    NoiseSchedule,
    SCENE_CODES,
    combine_conditioning,
    forward_diffuse,
    make_schedule,
    multires_noise,
    positional_encode,
    sinusoidal_embedding,
    softmax_rows,
    v_target,
)

_MAGIC = b"MGTD"
_VERSION = 1

_LIGHT = np.array([0.3, -0.4, 0.85])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


class ToyParamsFormatError(ValueError):
    """Serialized toy parameters are malformed."""


@dataclass
class ToyConfig:
    img_channels: int = 3
    geo_channels: int = 3
    size: int = 16
    features: int = 16
    embed_dim: int = 64

    def __post_init__(self):
        for name in ("img_channels", "geo_channels", "size", "features", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")

    def sections(self) -> list[tuple[str, tuple[int, ...]]]:
        ci = self.img_channels + self.geo_channels
        f, d, cg = self.features, self.embed_dim, self.geo_channels
        return [
            ("conv1_w", (f, ci, 3, 3)),
            ("conv1_b", (f,)),
            ("emb1", (f, d)),
            ("conv2_w", (f, f, 3, 3)),
            ("conv2_b", (f,)),
            ("emb2", (f, d)),
            ("attn_q", (f, f)),
            ("attn_k", (f, f)),
            ("attn_v", (f, f)),
            ("attn_o", (f, f)),
            ("attn_ob", (f,)),
            ("conv3_w", (f, f, 3, 3)),
            ("conv3_b", (f,)),
            ("emb3", (f, d)),
            ("conv4_w", (cg, f, 3, 3)),
            ("conv4_b", (cg,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.sections())


@dataclass
class ToyBatch:
    """Clean latent pairs plus the conditioning image and scene codes."""

    z0_d: np.ndarray  # (B, geo_channels, H, W)
    z0_n: np.ndarray
    image: np.ndarray  # (B, img_channels, H, W)
    scene_codes: tuple[str, ...]

    @property
    def batch_size(self) -> int:
        return self.z0_d.shape[0]


def _pair_outer(a, b):
    # sum over leading axes: (..., F), (..., G) -> (F, G)
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _conv3x3_forward(x, w, b):
    bsz, cin, h, wd = x.shape
    fout = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((bsz, cin, 9, h, wd))
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, k] = xp[:, :, i : i + h, j : j + wd]
    # (F, C*9) @ (B, C*9, HW) broadcast-matmuls to (B, F, HW); BLAS-backed
    out = w.reshape(fout, cin * 9) @ cols.reshape(bsz, cin * 9, h * wd)
    out = out.reshape(bsz, fout, h, wd) + b[None, :, None, None]
    return out, cols


def _conv3x3_backward(dout, cols, w):
    fout, cin = w.shape[0], w.shape[1]
    bsz, _, h, wd = dout.shape
    d2 = dout.reshape(bsz, fout, h * wd)
    c2 = cols.reshape(bsz, cin * 9, h * wd)
    dw = np.matmul(d2, c2.transpose(0, 2, 1)).sum(axis=0).reshape(fout, cin, 3, 3)
    db = dout.sum(axis=(0, 2, 3))
    dcols = (w.reshape(fout, cin * 9).T @ d2).reshape(bsz, cin, 9, h, wd)
    dxp = np.zeros((bsz, cin, h + 2, wd + 2))
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, :, i : i + h, j : j + wd] += dcols[:, :, k]
    return dw, db, dxp[:, :, 1:-1, 1:-1]


def _tokens(h):
    b, f, hh, ww = h.shape
    return np.transpose(h, (0, 2, 3, 1)).reshape(b, hh * ww, f)


def _untokens(t, hh, ww):
    b, _, f = t.shape
    return np.transpose(t.reshape(b, hh, ww, f), (0, 3, 1, 2))


class ToyDenoiser:
    """Parameter bookkeeping plus forward/backward for the toy network."""

    def __init__(self, config: ToyConfig | None = None):
        self.config = config if config is not None else ToyConfig()
        self._sections = self.config.sections()

    @property
    def n_params(self) -> int:
        return self.config.n_params

    def unpack(self, params: np.ndarray) -> dict[str, np.ndarray]:
        params = np.asarray(params)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        views = {}
        off = 0
        for name, shape in self._sections:
            size = int(np.prod(shape))
            views[name] = params[off : off + size].reshape(shape)
            off += size
        return views

    def init_params(self, rng: np.random.Generator | int | None = None) -> np.ndarray:
        rng = np.random.default_rng(rng)
        flat = np.zeros(self.n_params)
        p = self.unpack(flat)
        d = self.config.embed_dim
        for name in ("conv1_w", "conv2_w", "conv3_w"):
            fan_in = int(np.prod(p[name].shape[1:]))
            p[name][:] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), p[name].shape)
        for name in ("attn_q", "attn_k", "attn_v", "attn_o"):
            f = p[name].shape[1]
            p[name][:] = rng.normal(0.0, 1.0 / np.sqrt(f), p[name].shape)
        for name in ("emb1", "emb2", "emb3"):
            p[name][:] = rng.normal(0.0, 0.5 / np.sqrt(d), p[name].shape)
        # near-zero head: the initial prediction is ~0, so the initial loss
        # is the variance of the v targets themselves
        fan_in = int(np.prod(p["conv4_w"].shape[1:]))
        p["conv4_w"][:] = rng.normal(0.0, 1e-2 / np.sqrt(fan_in), p["conv4_w"].shape)
        return flat

    def conditioning(self, t: np.ndarray, domain: str, scene_codes) -> np.ndarray:
        d = self.config.embed_dim
        rows = [
            combine_conditioning(
                sinusoidal_embedding(float(tb), d),
                positional_encode(domain, d),
                positional_encode(scene, d),
            )
            for tb, scene in zip(t, scene_codes)
        ]
        return np.stack(rows)

    def predict(
        self,
        params,
        batch: ToyBatch,
        z_t_d,
        z_t_n,
        t: np.ndarray,
        domains: tuple[str, str] = ("depth", "normal"),
    ):
        """Forward pass; returns (v_hat_d, v_hat_n, cache for backward).

        ``domains`` overrides the switcher code fed to each branch; the
        default conditions the first branch as depth and the second as
        normal. Swapping them must visibly change the outputs.
        """
        p = self.unpack(params)
        hh = ww = self.config.size
        scale = 1.0 / np.sqrt(self.config.features)

        cond = {
            "d": self.conditioning(t, domains[0], batch.scene_codes),
            "n": self.conditioning(t, domains[1], batch.scene_codes),
        }
        z_t = {"d": z_t_d, "n": z_t_n}
        cache = {"cond": cond, "p": p}

        for g in ("d", "n"):
            x = np.concatenate([batch.image, z_t[g]], axis=1)
            pre1, cols1 = _conv3x3_forward(x, p["conv1_w"], p["conv1_b"])
            pre1 += (cond[g] @ p["emb1"].T)[:, :, None, None]
            h1, s1 = _silu(pre1)
            pre2, cols2 = _conv3x3_forward(h1, p["conv2_w"], p["conv2_b"])
            pre2 += (cond[g] @ p["emb2"].T)[:, :, None, None]
            h2, s2 = _silu(pre2)
            cache[g] = dict(cols1=cols1, pre1=pre1, s1=s1, cols2=cols2, pre2=pre2, s2=s2, h2=h2)

        for g, o in (("d", "n"), ("n", "d")):
            tg = _tokens(cache[g]["h2"])
            to = _tokens(cache[o]["h2"])
            joint = np.concatenate([tg, to], axis=1)
            q = tg @ p["attn_q"].T
            k = joint @ p["attn_k"].T
            v = joint @ p["attn_v"].T
            att = softmax_rows((q @ k.transpose(0, 2, 1)) * scale)
            mixed = att @ v
            out_tok = mixed @ p["attn_o"].T + p["attn_ob"]
            cache[g].update(tg=tg, joint=joint, q=q, k=k, v=v, att=att, mixed=mixed)
            cache[g]["h3"] = cache[g]["h2"] + _untokens(out_tok, hh, ww)

        v_hat = {}
        for g in ("d", "n"):
            pre3, cols3 = _conv3x3_forward(cache[g]["h3"], p["conv3_w"], p["conv3_b"])
            pre3 += (cond[g] @ p["emb3"].T)[:, :, None, None]
            h4, s3 = _silu(pre3)
            out, cols4 = _conv3x3_forward(h4, p["conv4_w"], p["conv4_b"])
            cache[g].update(cols3=cols3, pre3=pre3, s3=s3, cols4=cols4)
            v_hat[g] = out
        cache["scale"] = scale
        return v_hat["d"], v_hat["n"], cache

    def loss_and_grads(
        self,
        params: np.ndarray,
        batch: ToyBatch,
        t: np.ndarray,
        eps_d: np.ndarray,
        eps_n: np.ndarray,
        schedule: NoiseSchedule,
    ) -> tuple[float, np.ndarray]:
        """Mean (over batch) of the two summed squared v-prediction errors."""
        t = np.asarray(t, dtype=np.int64)
        bsz = batch.batch_size
        a, s = schedule.at(t)
        a4 = a[:, None, None, None]
        s4 = s[:, None, None, None]
        z_t = {"d": a4 * batch.z0_d + s4 * eps_d, "n": a4 * batch.z0_n + s4 * eps_n}
        target = {"d": a4 * eps_d - s4 * batch.z0_d, "n": a4 * eps_n - s4 * batch.z0_n}

        v_hat_d, v_hat_n, cache = self.predict(params, batch, z_t["d"], z_t["n"], t)
        v_hat = {"d": v_hat_d, "n": v_hat_n}
        loss = sum(float(np.sum((v_hat[g] - target[g]) ** 2)) for g in ("d", "n")) / bsz

        grads = np.zeros_like(np.asarray(params, dtype=np.float64))
        gp = self.unpack(grads)
        p = cache["p"]
        cond = cache["cond"]
        hh = ww = self.config.size
        n_tok = hh * ww
        scale = cache["scale"]

        dh3 = {}
        for g in ("d", "n"):
            c = cache[g]
            dout = 2.0 * (v_hat[g] - target[g]) / bsz
            dw4, db4, dh4 = _conv3x3_backward(dout, c["cols4"], p["conv4_w"])
            gp["conv4_w"] += dw4
            gp["conv4_b"] += db4
            dpre3 = dh4 * _silu_grad(c["pre3"], c["s3"])
            gp["emb3"] += dpre3.sum(axis=(2, 3)).T @ cond[g]
            dw3, db3, dh3_g = _conv3x3_backward(dpre3, c["cols3"], p["conv3_w"])
            gp["conv3_w"] += dw3
            gp["conv3_b"] += db3
            dh3[g] = dh3_g

        dtok = {"d": np.zeros_like(cache["d"]["tg"]), "n": np.zeros_like(cache["n"]["tg"])}
        dh2 = {g: dh3[g].copy() for g in ("d", "n")}  # residual path
        for g, o in (("d", "n"), ("n", "d")):
            c = cache[g]
            dout_tok = _tokens(dh3[g])
            gp["attn_o"] += _pair_outer(dout_tok, c["mixed"])
            gp["attn_ob"] += dout_tok.sum(axis=(0, 1))
            dmixed = dout_tok @ p["attn_o"]
            datt = dmixed @ c["v"].transpose(0, 2, 1)
            dv = c["att"].transpose(0, 2, 1) @ dmixed
            ds = c["att"] * (datt - np.sum(datt * c["att"], axis=-1, keepdims=True))
            dp_ = ds * scale
            dq = dp_ @ c["k"]
            dk = dp_.transpose(0, 2, 1) @ c["q"]
            gp["attn_q"] += _pair_outer(dq, c["tg"])
            dtok[g] += dq @ p["attn_q"]
            gp["attn_k"] += _pair_outer(dk, c["joint"])
            djoint = dk @ p["attn_k"]
            gp["attn_v"] += _pair_outer(dv, c["joint"])
            djoint += dv @ p["attn_v"]
            dtok[g] += djoint[:, :n_tok]
            dtok[o] += djoint[:, n_tok:]

        for g in ("d", "n"):
            c = cache[g]
            dh2[g] += _untokens(dtok[g], hh, ww)
            dpre2 = dh2[g] * _silu_grad(c["pre2"], c["s2"])
            gp["emb2"] += dpre2.sum(axis=(2, 3)).T @ cond[g]
            dw2, db2, dh1 = _conv3x3_backward(dpre2, c["cols2"], p["conv2_w"])
            gp["conv2_w"] += dw2
            gp["conv2_b"] += db2
            dpre1 = dh1 * _silu_grad(c["pre1"], c["s1"])
            gp["emb1"] += dpre1.sum(axis=(2, 3)).T @ cond[g]
            dw1, db1, _ = _conv3x3_backward(dpre1, c["cols1"], p["conv1_w"])
            gp["conv1_w"] += dw1
            gp["conv1_b"] += db1

        return loss, grads


def make_toy_batch(
    config: ToyConfig, batch_size: int, rng: np.random.Generator | int | None = None
) -> ToyBatch:
    """Procedural depth/normal latent pairs with a shaded conditioning image.

    Each sample is a smooth random height field whose layout depends on the
    scene code: outdoor scenes are ramp-dominated, indoor scenes mix bumps
    and tilt, object scenes are a single centered blob. The depth channel is
    min-max normalized to [-1, 1] and replicated; the normal latent holds the
    unit normal components; the image latent is a Lambertian shading of the
    normals, rescaled to [-1, 1] and replicated.
    """
    rng = np.random.default_rng(rng)
    size = config.size
    z0_d = np.empty((batch_size, config.geo_channels, size, size))
    z0_n = np.empty((batch_size, config.geo_channels, size, size))
    image = np.empty((batch_size, config.img_channels, size, size))
    codes = []
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    for b in range(batch_size):
        code = SCENE_CODES[rng.integers(0, len(SCENE_CODES))]
        codes.append(code)
        if code == "outdoor":
            tilt = rng.uniform(0.2, 0.5) * rng.choice([-1.0, 1.0])
            z = tilt * v
            zu = np.zeros_like(z)
            zv = np.full_like(z, tilt)
            zb, zbu, zbv = height_field((size, size), "bumps", rng)
            z, zu, zv = z + 0.2 * zb, zu + 0.2 * zbu, zv + 0.2 * zbv
        elif code == "indoor":
            z, zu, zv = height_field((size, size), "bumps", rng)
        else:  # object: one central blob
            cu = size / 2 + rng.uniform(-2, 2)
            cv = size / 2 + rng.uniform(-2, 2)
            sg = rng.uniform(0.15, 0.3) * size
            amp = rng.uniform(0.3, 0.8) * sg
            gauss = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * sg**2))
            z = amp * gauss
            zu = amp * gauss * -(u - cu) / sg**2
            zv = amp * gauss * -(v - cv) / sg**2

        span = z.max() - z.min()
        d_norm = 2.0 * (z - z.min()) / span - 1.0 if span > 0 else np.zeros_like(z)
        z0_d[b] = np.broadcast_to(d_norm, (config.geo_channels, size, size))

        normals = normals_from_gradients(zu, zv).values
        n_lat = np.transpose(normals, (2, 0, 1))
        if config.geo_channels >= 3:
            z0_n[b, :3] = n_lat
            z0_n[b, 3:] = 0.0
        else:
            z0_n[b] = n_lat[: config.geo_channels]

        shade = np.clip(normals @ _LIGHT, 0.0, 1.0)
        image[b] = np.broadcast_to(2.0 * shade - 1.0, (config.img_channels, size, size))
    return ToyBatch(z0_d=z0_d, z0_n=z0_n, image=image, scene_codes=tuple(codes))


def draw_step_noise(
    batch: ToyBatch, schedule: NoiseSchedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-sample timestep (shared by both branches) and independent pyramid noises."""
    bsz = batch.batch_size
    shp = batch.z0_d.shape[1:]
    t = rng.integers(1, schedule.timesteps + 1, size=bsz)
    eps_d = np.stack([multires_noise(shp, rng=rng) for _ in range(bsz)])
    eps_n = np.stack([multires_noise(shp, rng=rng) for _ in range(bsz)])
    return t, eps_d, eps_n


def toy_denoiser_step(
    model: ToyDenoiser,
    params: np.ndarray,
    batch: ToyBatch,
    schedule: NoiseSchedule,
    rng: np.random.Generator | int | None = None,
) -> tuple[float, np.ndarray]:
    """One stochastic training step: draw (t, noise), return loss and gradients."""
    rng = np.random.default_rng(rng)
    t, eps_d, eps_n = draw_step_noise(batch, schedule, rng)
    return model.loss_and_grads(params, batch, t, eps_d, eps_n, schedule)


@dataclass
class ToyTrainResult:
    params: np.ndarray
    losses: list[float]
    initial_eval_loss: float
    final_eval_loss: float
    config: ToyConfig = field(default_factory=ToyConfig)


def train_toy(
    steps: int = 2000,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 8,
    config: ToyConfig | None = None,
    schedule: NoiseSchedule | None = None,
    eval_size: int = 32,
) -> ToyTrainResult:
    """Train the toy denoiser with Adam on procedural scenes.

    Progress is judged on a fixed held-out set with fixed timesteps and
    noises, evaluated before and after training.
    """
    config = config if config is not None else ToyConfig()
    schedule = schedule if schedule is not None else make_schedule()
    model = ToyDenoiser(config)
    rng = np.random.default_rng(seed)
    params = model.init_params(rng)

    eval_batch = make_toy_batch(config, eval_size, rng)
    eval_t, eval_ed, eval_en = draw_step_noise(eval_batch, schedule, rng)

    def eval_loss(p):
        loss, _ = model.loss_and_grads(p, eval_batch, eval_t, eval_ed, eval_en, schedule)
        return loss

    initial = eval_loss(params)

    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    losses = []
    for step in range(1, steps + 1):
        batch = make_toy_batch(config, batch_size, rng)
        loss, g = toy_denoiser_step(model, params, batch, schedule, rng)
        losses.append(loss)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**step)
        vhat = v / (1 - beta2**step)
        params = params - lr * mhat / (np.sqrt(vhat) + eps_adam)

    final = eval_loss(params)
    return ToyTrainResult(
        params=params, losses=losses, initial_eval_loss=initial, final_eval_loss=final,
        config=config,
    )


def save_toy_params(path, config: ToyConfig, params: np.ndarray) -> bytes:
    """Serialize toy parameters: magic, version, config, section sizes, float32 data."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (config.n_params,):
        raise ValueError(f"expected {config.n_params} params, got shape {params.shape}")
    sections = config.sections()
    header = struct.pack(
        "<4sIIIIIII",
        _MAGIC,
        _VERSION,
        config.embed_dim,
        config.img_channels,
        config.geo_channels,
        config.size,
        config.features,
        len(sections),
    )
    sizes = struct.pack(f"<{len(sections)}I", *(int(np.prod(s)) for _, s in sections))
    payload = params.astype("<f4").tobytes()
    blob = header + sizes + payload
    if path is not None:
        from ..io import atomic_write_bytes

        atomic_write_bytes(path, blob)
    return blob


def load_toy_params(source) -> tuple[ToyConfig, np.ndarray]:
    """Inverse of :func:`save_toy_params`; accepts a path or raw bytes."""
    if isinstance(source, (bytes, bytearray)):
        blob = bytes(source)
    else:
        with open(source, "rb") as fh:
            blob = fh.read()
    head_fmt = "<4sIIIIIII"
    head_size = struct.calcsize(head_fmt)
    if len(blob) < head_size:
        raise ToyParamsFormatError(f"truncated header: {len(blob)} bytes, need {head_size}")
    magic, version, d, ci, cg, size, feat, n_sec = struct.unpack_from(head_fmt, blob)
    if magic != _MAGIC:
        raise ToyParamsFormatError(f"bad magic {magic!r} at byte 0, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ToyParamsFormatError(f"unsupported version {version} at byte 4")
    try:
        config = ToyConfig(
            img_channels=ci, geo_channels=cg, size=size, features=feat, embed_dim=d
        )
    except ValueError as exc:
        raise ToyParamsFormatError(f"invalid config in header: {exc}") from exc
    sec_fmt = f"<{n_sec}I"
    sec_size = struct.calcsize(sec_fmt)
    if len(blob) < head_size + sec_size:
        raise ToyParamsFormatError(f"truncated section table at byte {head_size}")
    sizes = struct.unpack_from(sec_fmt, blob, head_size)
    expected = tuple(int(np.prod(s)) for _, s in config.sections())
    if sizes != expected:
        raise ToyParamsFormatError(
            f"section sizes {sizes} do not match config-derived sizes {expected}"
        )
    off = head_size + sec_size
    n = sum(sizes)
    if len(blob) != off + 4 * n:
        raise ToyParamsFormatError(
            f"payload length {len(blob) - off} at byte {off}, expected {4 * n}"
        )
    params = np.frombuffer(blob, dtype="<f4", count=n, offset=off).astype(np.float64)
    return config, params
