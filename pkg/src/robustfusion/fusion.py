"""Fusion steps: ways of combining LiDAR and camera BEV feature tensors.

Every variant maps ``(L: (B, C1, H, W), C: (B, C2, H, W))`` to a fused
``(B, C_out, H, W)`` tensor, with ``C_out = C1 + C2`` for concatenation,
``C1`` for element-wise addition and ``C_f`` for the learned variants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

VARIANTS = ("concat", "add", "conv", "fully_connected", "conv_ed", "conv_se", "conv_ed_se")

# row labels used in the misalignment results table
TABLE_NAMES = {
    "add": "Element-wise add",
    "concat": "Concatenation",
    "fully_connected": "Fully connected",
    "conv": "Convolution",
    "conv_ed": "Convolution with encoder-decoder",
    "conv_se": "Convolution with SE-block (Baseline)",
    "conv_ed_se": "Convolution with encoder decoder and SE-block (Ours)",
}


class FusionConfigError(ValueError):
    pass


def resolve_variant(name: str) -> str:
    """Accept a variant tag or a results-table row name."""
    key = name.strip()
    if key in VARIANTS:
        return key
    norm = key.lower().replace("-", " ").replace("(baseline)", "").replace("(ours)", "").strip()
    for tag, label in TABLE_NAMES.items():
        lab = label.lower().replace("-", " ").replace("(baseline)", "").replace("(ours)", "").strip()
        if norm == lab:
            return tag
    raise FusionConfigError(f"unknown fusion variant {name!r}; expected one of {VARIANTS}")


@dataclass(frozen=True)
class FusionConfig:
    C1: int = 6
    C2: int = 4
    C_f: int = 8
    H: int = 32
    W: int = 32
    se_reduction: int = 2
    kernel: int = 3
    fc_hidden: int = 0  # 0: one dense layer straight to C_f*H*W
    combiner: str = "concat"  # how the three encoder branches meet before SE
    param_budget: int = 10_000_000  # dense-layer ceiling for fully_connected

    def __post_init__(self):
        if self.H % 2 or self.W % 2:
            raise FusionConfigError("H and W must be even")
        if self.kernel % 2 == 0:
            raise FusionConfigError("kernel must be odd")
        if self.se_reduction < 1:
            raise FusionConfigError("se_reduction must be >= 1")
        if min(self.C1, self.C2, self.C_f) < 1:
            raise FusionConfigError("channel counts must be >= 1")
        if self.combiner not in ("concat", "sum"):
            raise FusionConfigError("combiner must be 'concat' or 'sum'")

    @property
    def full_scale(self) -> bool:
        return max(self.H, self.W) > 64 or max(self.C1, self.C2, self.C_f) > 64

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- layer helpers


def add_conv(store: ParamStore, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
    fan_in = cin * k * k
    store.add(f"{name}.weight", T.init_uniform(rng, (cout, cin, k, k), fan_in))
    store.add(f"{name}.bias", T.init_uniform(rng, (cout,), fan_in))


def add_bn(store: ParamStore, name: str, c: int) -> None:
    store.add(f"{name}.gamma", np.ones(c))
    store.add(f"{name}.beta", np.zeros(c))
    store.add_buffer(f"{name}.running_mean", np.zeros(c))
    store.add_buffer(f"{name}.running_var", np.ones(c))


def add_linear(store: ParamStore, name: str, din: int, dout: int, rng: np.random.Generator) -> None:
    store.add(f"{name}.weight", T.init_uniform(rng, (dout, din), din))
    store.add(f"{name}.bias", T.init_uniform(rng, (dout,), din))


def conv(store: ParamStore, name: str, x: Tensor) -> Tensor:
    w = store[f"{name}.weight"]
    return T.conv2d(x, w, store[f"{name}.bias"], stride=1, padding=(w.shape[2] - 1) // 2)


def bn(store: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batch_norm(
        x,
        store[f"{name}.gamma"],
        store[f"{name}.beta"],
        store.buffers[f"{name}.running_mean"],
        store.buffers[f"{name}.running_var"],
        training,
    )


def dense(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return T.linear(x, store[f"{name}.weight"], store[f"{name}.bias"])


def conv_bn_relu(store: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    return T.relu(bn(store, f"{name}.bn", conv(store, name, x), training))


def add_conv_bn(store, name, cin, cout, k, rng) -> None:
    add_conv(store, name, cin, cout, k, rng)
    add_bn(store, f"{name}.bn", cout)


def add_se(store: ParamStore, name: str, c: int, reduction: int, rng) -> None:
    add_linear(store, f"{name}.squeeze", c, c // reduction, rng)
    add_linear(store, f"{name}.excite", c // reduction, c, rng)


def se_gate(store: ParamStore, name: str, x: Tensor) -> Tensor:
    """Channel gate in (0, 1): pool -> dense -> relu -> dense -> sigmoid."""
    B, C = x.shape[:2]
    s = T.reshape(T.global_avg_pool(x), (B, C))
    return T.sigmoid(dense(store, f"{name}.excite", T.relu(dense(store, f"{name}.squeeze", s))))


# ---------------------------------------------------------------- fusion step


class FusionStep:
    """One fusion variant with its parameters.

    Parameters live in ``self.store`` under names prefixed by the variant.
    Call :meth:`train` / :meth:`eval` to switch batch-norm behaviour.
    """

    def __init__(self, variant: str, config: FusionConfig = FusionConfig(), rng: np.random.Generator | None = None):
        self.variant = resolve_variant(variant)
        self.config = config
        self.store = ParamStore()
        self.training = True
        self.last_gate: np.ndarray | None = None
        rng = rng if rng is not None else np.random.default_rng(0)
        self._build(rng)

    # -- construction

    def _p(self, name: str) -> str:
        return f"{self.variant}.{name}"

    def _build(self, rng) -> None:
        cfg, s, v = self.config, self.store, self.variant
        cin = cfg.C1 + cfg.C2
        k = cfg.kernel
        if v == "concat":
            return
        if v == "add":
            if cfg.C1 != cfg.C2:
                add_conv(s, self._p("project"), cfg.C2, cfg.C1, 1, rng)
            return
        if v == "fully_connected":
            din, dout = cin * cfg.H * cfg.W, cfg.C_f * cfg.H * cfg.W
            n_dense = (din + 1) * dout if cfg.fc_hidden == 0 else (din + 1) * cfg.fc_hidden + (cfg.fc_hidden + 1) * dout
            if n_dense > cfg.param_budget:
                raise FusionConfigError(
                    f"fully_connected needs {n_dense:,} dense weights (budget {cfg.param_budget:,}); "
                    "a dense layer over the whole BEV map is infeasible at full scale, "
                    "use a desk-scale grid or set fc_hidden"
                )
            if cfg.fc_hidden == 0:
                add_linear(s, self._p("fc"), din, dout, rng)
            else:
                add_linear(s, self._p("fc_in"), din, cfg.fc_hidden, rng)
                add_linear(s, self._p("fc"), cfg.fc_hidden, dout, rng)
            add_bn(s, self._p("fc.bn"), cfg.C_f)
            return

        if cfg.C_f >= cin:
            raise FusionConfigError(f"fusion convolution must reduce channels: C_f={cfg.C_f} >= C1+C2={cin}")
        add_conv_bn(s, self._p("fuse"), cin, cfg.C_f, k, rng)
        cf = cfg.C_f
        if v == "conv":
            return
        if v in ("conv_ed", "conv_ed_se") and cf % 2:
            raise FusionConfigError("encoder-decoder variants need an even C_f")
        if v == "conv_ed":
            add_conv_bn(s, self._p("channel_enc"), cf, cf // 2, 1, rng)
            add_conv_bn(s, self._p("channel_dec"), cf // 2, cf, 1, rng)
            add_conv_bn(s, self._p("spatial"), cf, cf, k, rng)
            return
        if v == "conv_se":
            if cf % cfg.se_reduction:
                raise FusionConfigError(f"se_reduction {cfg.se_reduction} must divide C_f={cf}")
            add_se(s, self._p("se"), cf, cfg.se_reduction, rng)
            return
        # conv_ed_se
        se_c = 3 * cf if cfg.combiner == "concat" else cf
        if se_c % cfg.se_reduction:
            raise FusionConfigError(f"se_reduction {cfg.se_reduction} must divide {se_c}")
        add_conv_bn(s, self._p("branch1"), cf, cf, k, rng)
        add_conv_bn(s, self._p("branch2"), cf, cf, k, rng)
        add_conv_bn(s, self._p("branch3.enc"), cf, cf // 2, 1, rng)
        add_conv_bn(s, self._p("branch3.mid"), cf // 2, cf // 2, k, rng)
        add_conv_bn(s, self._p("branch3.dec"), cf // 2, cf, 1, rng)
        add_se(s, self._p("se"), se_c, cfg.se_reduction, rng)
        add_conv_bn(s, self._p("reduce"), se_c, cf, 1, rng)

    # -- metadata

    @property
    def out_channels(self) -> int:
        if self.variant == "concat":
            return self.config.C1 + self.config.C2
        if self.variant == "add":
            return self.config.C1
        return self.config.C_f

    @property
    def param_count(self) -> int:
        return self.store.count()

    @property
    def full_scale(self) -> bool:
        return self.config.full_scale

    def final_convs(self) -> dict[str, str]:
        """Last convolution of each encoder branch, keyed by branch label."""
        if self.variant == "conv_ed":
            return {"channel": self._p("channel_dec"), "spatial": self._p("spatial")}
        if self.variant == "conv_ed_se":
            return {"1": self._p("branch1"), "2": self._p("branch2"), "3": self._p("branch3.dec")}
        return {}

    def zero_branches(self, labels) -> None:
        convs = self.final_convs()
        for lab in labels:
            name = convs[str(lab)]
            self.store[f"{name}.weight"].data[...] = 0.0
            self.store[f"{name}.bias"].data[...] = 0.0

    def train(self) -> "FusionStep":
        self.training = True
        return self

    def eval(self) -> "FusionStep":
        self.training = False
        return self

    # -- forward

    def __call__(self, L: Tensor, C: Tensor) -> Tensor:
        return self.forward(L, C)

    def forward(self, L: Tensor, C: Tensor) -> Tensor:
        cfg = self.config
        if L.ndim != 4 or C.ndim != 4:
            raise T.DimensionError("fusion inputs must be rank 4", axis="rank")
        if L.shape[1] != cfg.C1:
            raise T.DimensionError(f"LiDAR tensor has {L.shape[1]} channels, config says {cfg.C1}", axis="channels")
        if C.shape[1] != cfg.C2:
            raise T.DimensionError(f"camera tensor has {C.shape[1]} channels, config says {cfg.C2}", axis="channels")
        return getattr(self, f"_fwd_{self.variant}")(L, C)

    def _fwd_concat(self, L, C):
        return T.concat_channels(L, C)

    def _fwd_add(self, L, C):
        if self.config.C1 != self.config.C2:
            C = conv(self.store, self._p("project"), C)
        return T.add(L, C)

    def _fuse(self, L, C):
        return conv_bn_relu(self.store, self._p("fuse"), T.concat_channels(L, C), self.training)

    def _fwd_conv(self, L, C):
        return self._fuse(L, C)

    def _fwd_fully_connected(self, L, C):
        cfg, s = self.config, self.store
        x = T.concat_channels(L, C)
        B = x.shape[0]
        flat = T.reshape(x, (B, -1))
        if cfg.fc_hidden:
            flat = T.relu(dense(s, self._p("fc_in"), flat))
        y = T.reshape(dense(s, self._p("fc"), flat), (B, cfg.C_f, cfg.H, cfg.W))
        return T.relu(bn(s, self._p("fc.bn"), y, self.training))

    def _fwd_conv_ed(self, L, C):
        s, tr = self.store, self.training
        f = self._fuse(L, C)
        ch = conv_bn_relu(s, self._p("channel_dec"), conv_bn_relu(s, self._p("channel_enc"), f, tr), tr)
        sp = T.resample(conv_bn_relu(s, self._p("spatial"), T.resample(f, "down2"), tr), "up2")
        return T.add(ch, sp)

    def _fwd_conv_se(self, L, C):
        f = self._fuse(L, C)
        gate = se_gate(self.store, self._p("se"), f)
        self.last_gate = gate.data
        return T.scale_channels(f, gate)

    def _fwd_conv_ed_se(self, L, C):
        s, tr = self.store, self.training
        f = self._fuse(L, C)
        b1 = conv_bn_relu(s, self._p("branch1"), f, tr)
        down = T.resample(f, "down2")
        b2 = T.resample(conv_bn_relu(s, self._p("branch2"), down, tr), "up2")
        h = conv_bn_relu(s, self._p("branch3.enc"), down, tr)
        h = conv_bn_relu(s, self._p("branch3.mid"), h, tr)
        b3 = T.resample(conv_bn_relu(s, self._p("branch3.dec"), h, tr), "up2")
        if self.config.combiner == "concat":
            x = T.concat_many([b1, b2, b3])
        else:
            x = T.add(T.add(b1, b2), b3)
        gate = se_gate(s, self._p("se"), x)
        self.last_gate = gate.data
        return conv_bn_relu(s, self._p("reduce"), T.scale_channels(x, gate), tr)


def make_step(variant: str, config: FusionConfig = FusionConfig(), rng: np.random.Generator | int | None = None) -> FusionStep:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(0 if rng is None else rng)
    return FusionStep(variant, config, rng)


def forward(step: FusionStep, L: Tensor, C: Tensor) -> Tensor:
    return step.forward(L, C)
