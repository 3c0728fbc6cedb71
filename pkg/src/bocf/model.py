"""The BoCF network: conv feature extractor, RBF bag-of-features pooling,
optional self-attention, and an MLP illuminant head.

Pipeline for one image (``[...]`` stages depend on ``config.attention``)::

    conv -> relu -> maxpool2   (x conv_layers)
    [variant1: spatial mask over the feature map]
    rbf memberships -> mean    (histogram over K codewords)
    [variant2: mask over the histogram]
    dense -> relu -> dense -> softmax
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ATTENTION_MODES",
    "BocfConfig",
    "Codebook",
    "BocfModel",
    "Trace",
    "init_model",
    "parameter_count",
    "to_chw",
    "extract_features",
    "feature_vectors",
    "rbf_quantize",
    "bof_pool",
    "attention_variant1",
    "attention_variant2",
    "estimate_head",
    "forward",
    "forward_trace",
    "head_from_features",
    "sample_loss",
    "predict",
]

ATTENTION_MODES = ("none", "variant1", "variant2")
# variant1 grows with the square of the feature-map area; refuse absurd sizes
MAX_PARAMETERS = 50_000_000


@dataclass(frozen=True)
class BocfConfig:
    conv_layers: int = 2
    filters: int = 30
    kernel_size: int = 4
    codebook_size: int = 150
    hidden: int = 40
    attention: str = "none"
    input_size: int = 227

    def __post_init__(self):
        for name in ("conv_layers", "filters", "kernel_size", "codebook_size", "hidden", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}, got {self.attention!r}")
        size = self.input_size
        for _ in range(self.conv_layers):
            if size < 2:
                raise ValueError(f"input_size {self.input_size} too small for {self.conv_layers} pools")
            size //= 2

    @property
    def feature_size(self) -> int:
        """Side length S' of the final feature map."""
        size = self.input_size
        for _ in range(self.conv_layers):
            size //= 2
        return size

    @property
    def n_features(self) -> int:
        return self.feature_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Codebook:
    centers: np.ndarray  # [K, D]
    scales: np.ndarray  # [K], all > 0


def _param_shapes(cfg: BocfConfig) -> list[tuple[str, tuple[int, ...]]]:
    k, f = cfg.kernel_size, cfg.filters
    shapes = []
    c_in = 3
    for i in range(cfg.conv_layers):
        shapes += [(f"conv{i}.weight", (f, c_in, k, k)), (f"conv{i}.bias", (f,))]
        c_in = f
    K = cfg.codebook_size
    shapes += [("codebook.centers", (K, f)), ("codebook.log_scales", (K,))]
    if cfg.attention == "variant1":
        n = cfg.n_features
        shapes += [("att1.weight", (f * n, n)), ("att1.bias", (n,)), ("lam", ())]
    elif cfg.attention == "variant2":
        shapes += [("att2.weight", (K, K)), ("att2.bias", (K,)), ("lam", ())]
    h = cfg.hidden
    shapes += [("head.w1", (K, h)), ("head.b1", (h,)), ("head.w2", (h, 3)), ("head.b2", (3,))]
    return shapes


def parameter_count(cfg: BocfConfig) -> int:
    """Number of scalar parameters implied by ``cfg``."""
    return sum(int(np.prod(s)) for _, s in _param_shapes(cfg))


@dataclass
class BocfModel:
    config: BocfConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def codebook(self) -> Codebook:
        return Codebook(
            self.params["codebook.centers"].data.copy(),
            np.exp(self.params["codebook.log_scales"].data),
        )

    @property
    def lam(self) -> float | None:
        t = self.params.get("lam")
        return None if t is None else float(t.data)

    def copy(self) -> "BocfModel":
        return BocfModel(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
        )

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def equals(self, other: "BocfModel") -> bool:
        """Bitwise equality of configuration and every parameter."""
        if self.config != other.config or list(self.params) != list(other.params):
            return False
        return all(
            a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.params.values(), other.params.values())
        )


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(cfg: BocfConfig, seed: int = 0, lam_init: float = 0.5) -> BocfModel:
    """Fresh parameters: Glorot-uniform weights, zero biases, unit RBF scales.

    Codebook centers start uniform in [0, 1); training replaces them with
    k-means centers.
    """
    count = parameter_count(cfg)
    if count > MAX_PARAMETERS:
        raise ValueError(
            f"configuration needs {count:,} parameters (limit {MAX_PARAMETERS:,}); "
            "reduce input_size for attention variant1"
        )
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith(".weight") and name.startswith("conv"):
            o, c, k, _ = shape
            value = _glorot(rng, shape, c * k * k, o * k * k)
        elif name in ("att1.weight", "att2.weight", "head.w1", "head.w2"):
            value = _glorot(rng, shape, shape[0], shape[1])
        elif name == "codebook.centers":
            value = rng.uniform(0.0, 1.0, size=shape)
        elif name == "lam":
            value = np.array(float(lam_init))
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return BocfModel(cfg, params)


# ---------------------------------------------------------------------------
# forward stages


def to_chw(img) -> Tensor:
    """Accept an (H, W, 3) array or a [3, H, W] tensor."""
    if isinstance(img, Tensor):
        return img
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise T.ShapeError(f"expected an (H, W, 3) image, got {arr.shape}")
    return Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def extract_features(model: BocfModel, image) -> Tensor:
    """Final feature map [D, S', S'] from conv -> relu -> maxpool2 blocks."""
    x = to_chw(image)
    cfg = model.config
    if x.shape != (3, cfg.input_size, cfg.input_size):
        raise T.ShapeError(
            f"image {x.shape[1:]} does not match input size {cfg.input_size}"
        )
    for i in range(cfg.conv_layers):
        x = T.conv2d(x, model[f"conv{i}.weight"], model[f"conv{i}.bias"])
        x = T.maxpool2(T.relu(x))
    return x


def feature_vectors(fmap: Tensor) -> Tensor:
    """[D, S', S'] map -> [N, D] matrix of per-position feature vectors."""
    d = fmap.shape[0]
    return T.transpose(T.reshape(fmap, (d, -1)))


def rbf_quantize(model: BocfModel, x) -> Tensor:
    """Membership vector of length K for one feature vector."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    row = T.reshape(x, (1, -1))
    phi = T.rbf_memberships(row, model["codebook.centers"], model["codebook.log_scales"])
    return T.reshape(phi, (-1,))


def bof_pool(model: BocfModel, features: Tensor) -> Tensor:
    """Histogram (length K) = mean RBF membership over the N feature vectors."""
    if features.shape[0] == 0:
        raise T.ShapeError("bof_pool needs at least one feature vector")
    phi = T.rbf_memberships(features, model["codebook.centers"], model["codebook.log_scales"])
    return T.mean_rows(phi)


def _require(model: BocfModel, mode: str) -> None:
    if model.config.attention != mode:
        raise ValueError(f"model attention is {model.config.attention!r}, not {mode!r}")


def _variant1(model: BocfModel, fmap: Tensor) -> tuple[Tensor, Tensor]:
    _require(model, "variant1")
    d = fmap.shape[0]
    flat2d = T.reshape(fmap, (d, -1))
    mask = T.softmax(T.dense(T.reshape(flat2d, (-1,)), model["att1.weight"], model["att1.bias"]))
    masked = T.spatial_mask(flat2d, mask)
    out = T.blend(model["lam"], masked, flat2d)
    return T.reshape(out, fmap.shape), mask


def attention_variant1(model: BocfModel, fmap: Tensor) -> Tensor:
    """Spatial attention on the feature map, blended with weight lambda.

    A uniform mask is neutral thanks to the N-rescale in ``spatial_mask``.
    """
    return _variant1(model, fmap)[0]


def _variant2(model: BocfModel, hist: Tensor) -> tuple[Tensor, Tensor]:
    _require(model, "variant2")
    mask = T.softmax(T.dense(hist, model["att2.weight"], model["att2.bias"]))
    return T.blend(model["lam"], T.mul(mask, hist), hist), mask


def attention_variant2(model: BocfModel, hist: Tensor) -> Tensor:
    """``lam * (v * hist) + (1 - lam) * hist`` with ``v = softmax(hist @ W + b)``; not renormalized."""
    return _variant2(model, hist)[0]


def estimate_head(model: BocfModel, rep: Tensor) -> Tensor:
    if rep.shape != (model.config.codebook_size,):
        raise T.ShapeError(f"head expects a vector of length {model.config.codebook_size}, got {rep.shape}")
    h = T.relu(T.dense(rep, model["head.w1"], model["head.b1"]))
    return T.softmax(T.dense(h, model["head.w2"], model["head.b2"]))


class Trace(NamedTuple):
    fmap: Tensor
    features: Tensor
    hist: Tensor
    rep: Tensor
    estimate: Tensor
    mask: Tensor | None


def head_from_features(model: BocfModel, features: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor | None]:
    """Pooling onward: returns (histogram, head input, estimate, variant2 mask)."""
    hist = bof_pool(model, features)
    rep, mask = hist, None
    if model.config.attention == "variant2":
        rep, mask = _variant2(model, hist)
    return hist, rep, estimate_head(model, rep), mask


def forward_trace(model: BocfModel, image) -> Trace:
    fmap = extract_features(model, image)
    mask = None
    if model.config.attention == "variant1":
        fmap, mask = _variant1(model, fmap)
    feats = feature_vectors(fmap)
    hist, rep, est, mask2 = head_from_features(model, feats)
    return Trace(fmap, feats, hist, rep, est, mask if mask is not None else mask2)


def forward(model: BocfModel, image) -> Tensor:
    """Simplex illuminant estimate (length-3 tensor) for an input-sized image."""
    return forward_trace(model, image).estimate


def sample_loss(model: BocfModel, image, gt) -> Tensor:
    """Angular loss (radians) between the estimate and the ground truth."""
    gt = np.asarray(gt, dtype=np.float64)
    return T.angular_loss(forward(model, image), gt / gt.sum())


def predict(model: BocfModel, img: np.ndarray) -> np.ndarray:
    """Estimate for an arbitrary-size image via the deterministic test path."""
    from .imageio import prepare_test_image

    return forward(model, prepare_test_image(img, model.config.input_size)).data.copy()
