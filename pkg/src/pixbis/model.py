"""Densely connected backbone with a pixel-wise map head and a binary head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TOTAL_STRIDE = 16


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple = (64, 64)
    stem_channels: int = 16
    growth_rate: int = 8
    block_layers: tuple = (6, 12)
    compression: float = 0.5
    bottleneck_factor: int = 4
    lam: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def full_size(cls) -> "ModelConfig":
        """224x224 input, growth 48, stem 96, blocks (6, 12): a 14x14x384 map."""
        return cls(input_size=(224, 224), stem_channels=96, growth_rate=48)

    def validate(self) -> None:
        h, w = self.input_size
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE or h <= 0 or w <= 0:
            raise ValueError(f"input size {h}x{w} must be positive multiples of {TOTAL_STRIDE}")
        if self.stem_channels < 1 or self.growth_rate < 1 or self.bottleneck_factor < 1:
            raise ValueError("stem_channels, growth_rate and bottleneck_factor must be >= 1")
        if len(self.block_layers) != 2 or min(self.block_layers) < 1:
            raise ValueError(f"block_layers must be two positive ints, got {self.block_layers}")
        if not 0 < self.compression <= 1:
            raise ValueError(f"compression must lie in (0, 1], got {self.compression}")
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")

    @property
    def map_size(self) -> tuple:
        return self.input_size[0] // TOTAL_STRIDE, self.input_size[1] // TOTAL_STRIDE

    def channel_plan(self) -> list:
        """Channel count after stem, block1, transition1, block2, transition2."""
        c = self.stem_channels
        plan = [c]
        for n_layers in self.block_layers:
            c += n_layers * self.growth_rate
            plan.append(c)
            c = int(c * self.compression)
            plan.append(c)
        return plan

    @property
    def backbone_channels(self) -> int:
        return self.channel_plan()[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["block_layers"] = list(self.block_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["input_size"] = tuple(d["input_size"])
        d["block_layers"] = tuple(d["block_layers"])
        return cls(**d)


def _conv_shape(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@dataclass
class Model:
    config: ModelConfig
    params: dict
    buffers: dict
    training: bool = field(default=True)

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def named_parameters(self) -> list:
        return list(self.params.items())

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        state = {name: t.data for name, t in self.params.items()}
        state.update(self.buffers)
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.params) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {t.shape}")
            t.data = np.array(state[name], dtype=t.dtype)
        for name, buf in self.buffers.items():
            self.buffers[name] = np.array(state[name], dtype=buf.dtype)

    def astype(self, dtype) -> "Model":
        params = {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.params.items()}
        buffers = {n: b.astype(dtype) for n, b in self.buffers.items()}
        return Model(self.config, params, buffers, self.training)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward -------------------------------------------------------------

    def _norm(self, prefix, x):
        return ad.batchnorm2d(
            x,
            self.params[prefix + ".gamma"],
            self.params[prefix + ".beta"],
            self.buffers[prefix + ".running_mean"],
            self.buffers[prefix + ".running_var"],
            self.training,
            self.config.bn_eps,
            self.config.bn_momentum,
        )

    def _dense_block(self, x, b, trace=None, ablate=None):
        feats = [x]
        for j in range(1, self.config.block_layers[b - 1] + 1):
            p = f"block{b}.layer{j}"
            inp = ad.concat_channels(feats) if len(feats) > 1 else feats[0]
            if trace is not None:
                trace[(b, j)] = inp.data
            h = ad.relu(self._norm(p + ".norm1", inp))
            h = ad.conv2d(h, self.params[p + ".conv1.weight"])
            h = ad.relu(self._norm(p + ".norm2", h))
            h = ad.conv2d(h, self.params[p + ".conv2.weight"], padding=1)
            if ablate == (b, j):
                h = ad.mul(h, 0.0)
            feats.append(h)
        return ad.concat_channels(feats)

    def _transition(self, x, i):
        p = f"transition{i}"
        h = self._norm(p + ".norm", x)
        h = ad.conv2d(h, self.params[p + ".conv.weight"])
        return ad.pool2d(h, "avg", 2, 2)

    def backbone(self, x: Tensor, trace=None, ablate=None) -> Tensor:
        h = ad.conv2d(x, self.params["stem.conv.weight"], stride=2, padding=3)
        h = ad.relu(self._norm("stem.norm", h))
        h = ad.pool2d(h, "max", 3, 2, 1)
        for b in (1, 2):
            h = self._dense_block(h, b, trace, ablate)
            h = self._transition(h, b)
        return h

    def forward(self, x, trace=None, ablate=None):
        """Return (pixel map N x 1 x H/16 x W/16, binary output N x 1)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["stem.conv.weight"].dtype))
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (h, w):
            raise ValueError(f"expected input N x 3 x {h} x {w}, got {x.shape}")
        feat = self.backbone(x, trace, ablate)
        pmap = ad.sigmoid(ad.conv2d(feat, self.params["pixel_head.weight"], self.params["pixel_head.bias"]))
        logit = ad.affine(ad.flatten(pmap), self.params["binary_head.weight"], self.params["binary_head.bias"])
        return pmap, ad.sigmoid(logit)

    __call__ = forward

    def layer_inputs(self, x, ablate=None) -> dict:
        """Inputs seen by every dense layer, keyed by (block, layer)."""
        trace = {}
        with ad.no_grad():
            self.forward(x, trace=trace, ablate=ablate)
        return trace


def _param_specs(cfg: ModelConfig):
    """(name, shape, kind) in construction order."""
    specs = []

    def norm(prefix, c):
        specs.append((prefix + ".gamma", (c,), "ones"))
        specs.append((prefix + ".beta", (c,), "zeros"))

    c = cfg.stem_channels
    specs.append(("stem.conv.weight", (c, 3, 7, 7), "he"))
    norm("stem.norm", c)
    bott = cfg.bottleneck_factor * cfg.growth_rate
    for b, n_layers in enumerate(cfg.block_layers, start=1):
        for j in range(1, n_layers + 1):
            p = f"block{b}.layer{j}"
            norm(p + ".norm1", c)
            specs.append((p + ".conv1.weight", (bott, c, 1, 1), "he"))
            norm(p + ".norm2", bott)
            specs.append((p + ".conv2.weight", (cfg.growth_rate, bott, 3, 3), "he"))
            c += cfg.growth_rate
        out_c = int(c * cfg.compression)
        norm(f"transition{b}.norm", c)
        specs.append((f"transition{b}.conv.weight", (out_c, c, 1, 1), "he"))
        c = out_c
    mh, mw = cfg.map_size
    specs.append(("pixel_head.weight", (1, c, 1, 1), "he"))
    specs.append(("pixel_head.bias", (1,), "zeros"))
    specs.append(("binary_head.weight", (mh * mw, 1), "fan_in"))
    specs.append(("binary_head.bias", (1,), "zeros"))
    return specs


def build_model(config: ModelConfig | None = None, rng_seed: int = 0, dtype=np.float32) -> Model:
    cfg = config or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    params, buffers = {}, {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "fan_in":
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
        if name.endswith(".gamma"):
            prefix = name[: -len(".gamma")]
            buffers[prefix + ".running_mean"] = np.zeros(shape, dtype=dtype)
            buffers[prefix + ".running_var"] = np.ones(shape, dtype=dtype)
    model = Model(cfg, params, buffers)
    _assert_shapes(model)
    return model


def _assert_shapes(model: Model) -> None:
    cfg = model.config
    h, w = cfg.input_size
    for k, s, p in ((7, 2, 3), (3, 2, 1), (2, 2, 0), (2, 2, 0)):
        h, w = _conv_shape(h, k, s, p), _conv_shape(w, k, s, p)
    assert (h, w) == cfg.map_size, f"backbone map {h}x{w} != {cfg.map_size}"
    assert model.params["pixel_head.weight"].shape[1] == cfg.backbone_channels
    assert model.params["binary_head.weight"].shape[0] == h * w


# -- losses and scoring --------------------------------------------------------

def pixelwise_bce(map_pred: Tensor, y) -> Tensor:
    """BCE averaged over every map pixel; each sample's label fills its map."""
    return ad.bce(map_pred, y)


def binary_bce(pred: Tensor, y) -> Tensor:
    return ad.bce(pred, y)


def combined_loss(lp, lb, lam: float = 0.5):
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if isinstance(lp, Tensor) or isinstance(lb, Tensor):
        return ad.add(ad.mul(lp, lam), ad.mul(lb, 1 - lam))
    return lam * lp + (1 - lam) * lb


def frame_score(map_pred) -> np.ndarray:
    """Mean of each sample's map (higher = more bonafide)."""
    data = map_pred.data if isinstance(map_pred, Tensor) else np.asarray(map_pred)
    if data.ndim <= 2:
        return np.float64(data.mean())
    return data.reshape(data.shape[0], -1).mean(axis=1, dtype=np.float64)
