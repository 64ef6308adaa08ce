"""Attention MIL models with a variational posterior over attention logits.

Four variants: the bag transform is either per-instance (ABMIL) or a
pre-norm transformer encoder (T-ABMIL); the attention posterior is either a
point mass at ``mu(X)`` (DiracDelta) or a diagonal Gaussian (DiagGaussian).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Bag

BAG_TRANSFORMS = ("ABMIL", "T-ABMIL")
POSTERIORS = ("DiracDelta", "DiagGaussian")
SIGMA2_FLOOR = 1e-6


@dataclass(frozen=True)
class ModelVariant:
    bag_transform: str = "ABMIL"
    posterior: str = "DiagGaussian"
    P: int = 32
    D: int = 64
    D_f: int = 16
    layers: int = 2
    heads: int = 4
    d_qk: int = 64
    d_v: int = 64

    def __post_init__(self):
        if self.bag_transform not in BAG_TRANSFORMS:
            raise ValueError(f"bag_transform must be one of {BAG_TRANSFORMS}")
        if self.posterior not in POSTERIORS:
            raise ValueError(f"posterior must be one of {POSTERIORS}")
        if min(self.P, self.D, self.D_f, self.heads, self.d_qk, self.d_v) < 1 or self.layers < 0:
            raise ValueError("model dimensions must be positive")
        if self.D_f > self.D:
            raise ValueError("D_f must not exceed D")
        if self.d_v % self.heads or self.d_qk % self.heads:
            raise ValueError("heads must divide d_qk and d_v")

    @property
    def gaussian(self) -> bool:
        return self.posterior == "DiagGaussian"

    @property
    def name(self) -> str:
        sigma = "Diag" if self.gaussian else "0"
        return f"{self.bag_transform}+ProbSA[Sigma={sigma}]"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionPosterior:
    mu: Tensor
    sigma2: Tensor | None = None

    def __len__(self) -> int:
        return self.mu.shape[0]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(variant: ModelVariant, seed: int) -> dict[str, Tensor]:
    """Uniform(±sqrt(1/fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    v = variant
    shapes: dict[str, tuple] = {"embed.W": (v.P, v.D), "embed.b": (v.D,)}
    if v.bag_transform == "T-ABMIL":
        for l in range(v.layers):
            p = f"enc{l}."
            shapes.update({
                p + "ln1.g": (v.D,), p + "ln1.b": (v.D,),
                p + "Wq": (v.D, v.d_qk), p + "Wk": (v.D, v.d_qk), p + "Wv": (v.D, v.d_v),
                p + "Wo": (v.d_v, v.D),
                p + "ln2.g": (v.D,), p + "ln2.b": (v.D,),
                p + "mlp.W1": (v.D, v.d_v), p + "mlp.b1": (v.d_v,),
                p + "mlp.W2": (v.d_v, v.D), p + "mlp.b2": (v.D,),
            })
    shapes.update({"att.W": (v.D, v.D_f), "att.w": (v.D_f,)})
    if v.gaussian:
        shapes.update({"var.W": (v.D, v.D_f), "var.w": (v.D_f,)})
    shapes.update({"cls.w": (v.D,), "cls.b": ()})

    params = {}
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = _uniform(rng, shape[0], shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


class MILModel:
    def __init__(self, variant: ModelVariant, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.variant = variant
        self.params = params if params is not None else init_params(variant, seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            raise ValueError("parameter names do not match the model variant")
        for k, arr in state.items():
            if arr.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)

    # --- forward pieces ---------------------------------------------------

    def embed(self, bag: Bag | np.ndarray) -> Tensor:
        X = bag.features if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.variant.P:
            raise ad.ShapeError(f"expected N x {self.variant.P} features, got {X.shape}")
        h = ad.matmul(X, self["embed.W"]) + self["embed.b"]
        if self.variant.bag_transform == "ABMIL":
            return ad.relu(h)
        return self.transformer_encode(h)

    def _self_attention(self, x: Tensor, p: str) -> Tensor:
        v = self.variant
        q = x @ self[p + "Wq"]
        k = x @ self[p + "Wk"]
        val = x @ self[p + "Wv"]
        dq, dv = v.d_qk // v.heads, v.d_v // v.heads
        scale = 1.0 / math.sqrt(dq)
        heads = []
        for h in range(v.heads):
            qh = q[:, h * dq:(h + 1) * dq]
            kh = k[:, h * dq:(h + 1) * dq]
            vh = val[:, h * dv:(h + 1) * dv]
            att = ad.softmax((qh @ kh.T) * scale)
            heads.append(att @ vh)
        out = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return out @ self[p + "Wo"]

    def _mlp(self, x: Tensor, p: str) -> Tensor:
        hidden = ad.tanh(x @ self[p + "mlp.W1"] + self[p + "mlp.b1"])
        return hidden @ self[p + "mlp.W2"] + self[p + "mlp.b2"]

    def transformer_encode(self, x) -> Tensor:
        y = ad.as_tensor(x)
        for l in range(self.variant.layers):
            p = f"enc{l}."
            z = y + self._self_attention(ad.layer_norm(y, self[p + "ln1.g"], self[p + "ln1.b"]), p)
            y = z + self._mlp(ad.layer_norm(z, self[p + "ln2.g"], self[p + "ln2.b"]), p)
        return y

    def attention_heads(self, H: Tensor) -> AttentionPosterior:
        mu = ad.tanh(H @ self["att.W"]) @ self["att.w"]
        if not self.variant.gaussian:
            return AttentionPosterior(mu)
        raw = ad.tanh(H @ self["var.W"]) @ self["var.w"]
        return AttentionPosterior(mu, sigma2_from_raw(raw))

    def logit(self, H: Tensor, f) -> Tensor:
        z = ad.softmax(f) @ H  # Hᵀ softmax(f)
        return ad.dot(z, self["cls.w"]) + self["cls.b"]

    def pool_and_classify(self, H: Tensor, f) -> Tensor:
        f = ad.as_tensor(f)
        if f.shape != (H.shape[0],):
            raise ad.ShapeError(f"attention logits {f.shape} vs {H.shape[0]} instances")
        return ad.sigmoid(self.logit(H, f))

    def posterior(self, bag: Bag) -> tuple[Tensor, AttentionPosterior]:
        H = self.embed(bag)
        return H, self.attention_heads(H)

    # --- prediction -------------------------------------------------------

    def predict_bag(self, bag: Bag, S: int = 16, seed: int = 0) -> float:
        """Monte-Carlo estimate of p(Y=1 | bag) averaged over ``S`` posterior samples."""
        if S < 1:
            raise ValueError("S must be >= 1")
        with ad.no_grad():
            H, post = self.posterior(bag)
            if post.sigma2 is None:
                return float(self.pool_and_classify(H, post.mu).data)
        probs = sampled_probabilities(self, H.data, post.mu.data, post.sigma2.data, S,
                                      np.random.default_rng(seed))
        return float(probs.mean())


def sigma2_from_raw(raw) -> Tensor:
    """Map an unconstrained head output to a variance: softplus(raw) + floor."""
    return ad.softplus(raw) + SIGMA2_FLOOR


def sample_attention(post: AttentionPosterior, noise) -> Tensor:
    """Reparameterised draw ``mu + sqrt(sigma2)·noise``; the Dirac posterior returns ``mu``."""
    if post.sigma2 is None:
        return post.mu
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != post.mu.shape:
        raise ad.ShapeError(f"noise {noise.shape} vs posterior {post.mu.shape}")
    return post.mu + ad.sqrt(post.sigma2) * noise


def sampled_probabilities(model: MILModel, H: np.ndarray, mu: np.ndarray, sigma2: np.ndarray,
                          S: int, rng: np.random.Generator, chunk: int = 8192) -> np.ndarray:
    """Bag probabilities for ``S`` reparameterised samples, evaluated in batches."""
    w = model["cls.w"].data
    b = float(model["cls.b"].data)
    Hw = H @ w  # the classifier is affine, so z·w = softmax(f)·(H w)
    std = np.sqrt(sigma2)
    out = np.empty(S)
    for lo in range(0, S, chunk):
        hi = min(S, lo + chunk)
        F = mu + std * rng.standard_normal((hi - lo, mu.shape[0]))
        att = ad._softmax_np(F)
        out[lo:hi] = ad._sigmoid_np(att @ Hw + b)
    return out


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"PSAC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: MILModel, extra: dict | None = None) -> None:
    """Binary layout: magic, u32 version, u32+JSON variant descriptor, u32 count,
    then per parameter: u32 name length, name, u32 ndim, u32 dims, float64 data."""
    desc = json.dumps({"variant": model.variant.to_dict(), "extra": extra or {}},
                      sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(desc)), desc,
              struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        arr = np.asarray(model.params[name].data, dtype="<f8", order="C")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[MILModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    try:
        pos = 4
        version, dlen = struct.unpack_from("<II", raw, pos)
        pos += 8
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        desc = json.loads(raw[pos:pos + dlen])
        pos += dlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated parameter {name}")
            state[name] = np.frombuffer(raw[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    model = MILModel(ModelVariant(**desc["variant"]))
    model.load_state(state)
    return model, desc.get("extra", {})
