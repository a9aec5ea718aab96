"""Attention-gated 3D encoder-decoder with a diagnosis head and a PET head.

The encoder is a stack of double-conv blocks (conv3 -> instance norm -> ReLU,
twice) with 2x max pooling between levels; channels double per level.  The
decoder mirrors it with trilinear upsampling + conv, taking skip features
through additive attention gates.  Classification pools the bottleneck and
the two preceding encoder scales (each gated by the bottleneck), applies a
per-scale linear layer, and averages the per-scale outputs.  The PET head is
a linear-activation 1x1x1 projection of the finest decoder features, with
auxiliary projections at every coarser scale for deep supervision.

Two ablation switches reproduce the reduced variants: ``use_attention=False``
replaces every gate with a plain pass-through, and ``use_pet_head=False``
removes all PET projections (the decoder itself remains).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .tensor import Tensor


class AttentionUnavailableError(RuntimeError):
    """Raised when attention maps are requested from a gate-free model."""


@dataclass
class AttentionGateParams:
    """The five parameter tensors of one additive attention gate."""

    w_x: Tensor     # (F_int, C_x, 1, 1, 1), applied to the input at stride r
    w_g: Tensor     # (F_int, C_g, 1, 1, 1)
    b_g: Tensor     # (F_int,)
    psi: Tensor     # (1, F_int, 1, 1, 1), no additive output term
    b_psi: Tensor   # (1,), added to the joint activation before the psi projection

    def __post_init__(self):
        f_int = self.w_x.shape[0]
        if f_int < 1:
            raise ValueError("attention gate needs at least one internal channel")
        if self.w_g.shape[0] != f_int:
            raise ValueError(f"w_g maps to {self.w_g.shape[0]} channels, w_x to {f_int}")
        if self.b_g.shape != (f_int,):
            raise ValueError(f"b_g shape {self.b_g.shape} != ({f_int},)")
        if self.psi.shape != (1, f_int, 1, 1, 1):
            raise ValueError(f"psi shape {self.psi.shape} != (1, {f_int}, 1, 1, 1)")
        if self.b_psi.shape != (1,):
            raise ValueError(f"b_psi shape {self.b_psi.shape} != (1,)")


def _gate_ratio(x: Tensor, g: Tensor) -> int:
    """The exact power-of-two factor between input and gating resolutions."""
    if x.data.ndim != 5 or g.data.ndim != 5:
        raise ValueError("attention_gate operands must be N,C,D,H,W")
    if x.shape[0] != g.shape[0]:
        raise ValueError(f"attention_gate: batch sizes differ: {x.shape[0]} vs {g.shape[0]}")
    ratios = set()
    for axis in (2, 3, 4):
        xs, gs = x.shape[axis], g.shape[axis]
        if gs == 0 or xs % gs:
            raise ValueError(
                f"attention_gate: axis {axis} extents {xs} vs {gs} are not an exact factor-2 relation")
        ratios.add(xs // gs)
    if len(ratios) != 1:
        raise ValueError(f"attention_gate: anisotropic resolution ratios {sorted(ratios)}")
    r = ratios.pop()
    if r < 2 or (r & (r - 1)):
        raise ValueError(f"attention_gate: resolution ratio {r} is not an exact power-of-two factor")
    return r


def attention_gate(x: Tensor, g: Tensor, params: AttentionGateParams) -> tuple[Tensor, Tensor]:
    """Gate feature map ``x`` with coarser signal ``g`` by additive attention.

    The input is brought to the gating resolution by the stride of the w_x
    projection; the joint activation passes ReLU, the scalar shift, the psi
    projection and a sigmoid; the resulting coefficients are trilinearly
    upsampled back to the input resolution and applied multiplicatively.

    Returns ``(gated, coefficients)`` with coefficients of shape N,1,D,H,W at
    the input resolution, values strictly inside (0, 1).
    """
    r = _gate_ratio(x, g)
    if params.w_x.shape[1] != x.shape[1]:
        raise ValueError(f"w_x expects {params.w_x.shape[1]} input channels, x has {x.shape[1]}")
    if params.w_g.shape[1] != g.shape[1]:
        raise ValueError(f"w_g expects {params.w_g.shape[1]} gating channels, g has {g.shape[1]}")
    xa = ops.conv3d(x, params.w_x, None, stride=r, padding=0)
    ga = ops.conv3d(g, params.w_g, params.b_g, stride=1, padding=0)
    joint = ops.relu(ops.add(xa, ga))
    score = ops.conv3d(ops.add(joint, params.b_psi), params.psi, None, stride=1, padding=0)
    alpha = ops.trilinear_resize(ops.sigmoid(score), x.shape[2:])
    return ops.mul(x, alpha), alpha


@dataclass(frozen=True)
class UPetConfig:
    """Architecture hyperparameters.

    ``deep_supervision_weights`` holds one weight per coarse scale
    (ℓ = 1 .. levels-1); the default halves per scale.  The two switches
    cover the points the source architecture leaves open: whether per-scale
    predictions are averaged as raw scores or as probabilities, and whether
    the pooled bottleneck contributes its own prediction.
    """

    levels: int = 4
    base_channels: int = 8
    input_shape: tuple[int, int, int] = (32, 32, 32)
    num_classes: int = 3
    use_attention: bool = True
    use_pet_head: bool = True
    lambda_l1: float = 1.0
    deep_supervision_weights: tuple[float, ...] = ()
    aggregate_probabilities: bool = False
    include_bottleneck_head: bool = True

    def __post_init__(self):
        if self.levels < 3:
            raise ValueError("levels must be >= 3: classification taps the bottleneck "
                             "plus the two preceding scales")
        if self.num_classes != 3:
            raise ValueError("the diagnosis head is fixed to the three classes CN, MCI, AD")
        if len(self.input_shape) != 3:
            raise ValueError(f"input_shape must be (D, H, W), got {self.input_shape}")
        div = 2 ** (self.levels - 1)
        for extent in self.input_shape:
            if extent % div:
                raise ValueError(f"input extent {extent} not divisible by 2^(levels-1) = {div}")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be non-negative")
        if not self.deep_supervision_weights:
            object.__setattr__(self, "deep_supervision_weights",
                               tuple(2.0 ** -l for l in range(1, self.levels)))
        if len(self.deep_supervision_weights) != self.levels - 1:
            raise ValueError(f"need {self.levels - 1} deep-supervision weights, "
                             f"got {len(self.deep_supervision_weights)}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** l for l in range(self.levels))


def config_fingerprint(config: UPetConfig) -> str:
    payload = {
        "levels": config.levels,
        "base_channels": config.base_channels,
        "input_shape": list(config.input_shape),
        "num_classes": config.num_classes,
        "use_attention": config.use_attention,
        "use_pet_head": config.use_pet_head,
        "lambda_l1": config.lambda_l1,
        "deep_supervision_weights": list(config.deep_supervision_weights),
        "aggregate_probabilities": config.aggregate_probabilities,
        "include_bottleneck_head": config.include_bottleneck_head,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def config_to_dict(config: UPetConfig) -> dict:
    return {
        "levels": config.levels,
        "base_channels": config.base_channels,
        "input_shape": list(config.input_shape),
        "num_classes": config.num_classes,
        "use_attention": config.use_attention,
        "use_pet_head": config.use_pet_head,
        "lambda_l1": config.lambda_l1,
        "deep_supervision_weights": list(config.deep_supervision_weights),
        "aggregate_probabilities": config.aggregate_probabilities,
        "include_bottleneck_head": config.include_bottleneck_head,
    }


def config_from_dict(d: dict) -> UPetConfig:
    return UPetConfig(
        levels=int(d["levels"]),
        base_channels=int(d["base_channels"]),
        input_shape=tuple(int(v) for v in d["input_shape"]),
        num_classes=int(d["num_classes"]),
        use_attention=bool(d["use_attention"]),
        use_pet_head=bool(d["use_pet_head"]),
        lambda_l1=float(d["lambda_l1"]),
        deep_supervision_weights=tuple(float(v) for v in d["deep_supervision_weights"]),
        aggregate_probabilities=bool(d["aggregate_probabilities"]),
        include_bottleneck_head=bool(d["include_bottleneck_head"]),
    )


@dataclass
class ModelOutputs:
    """One forward pass: aggregated and per-scale class scores, PET
    predictions, and every attention coefficient map keyed by gate name."""

    class_logits: Tensor
    per_scale_logits: list[Tensor]
    pet_pred: Tensor | None
    aux_pet_preds: list[Tensor]            # ordered by scale ℓ = 1 .. levels-1
    attention_maps: dict[str, Tensor] = field(default_factory=dict)
    input_spatial: tuple[int, int, int] = (0, 0, 0)


class UPetModel:
    """Instantiated parameter set plus the forward wiring."""

    def __init__(self, config: UPetConfig, seed: int, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.seed = seed
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction -------------------------------------------------------

    def _weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape)
        self._params[name] = Tensor(data, dtype=self.dtype, requires_grad=True)

    def _bias(self, name: str, shape: tuple[int, ...]) -> None:
        self._params[name] = Tensor(np.zeros(shape), dtype=self.dtype, requires_grad=True)

    def _conv(self, name: str, cin: int, cout: int, k: int, bias: bool) -> None:
        self._weight(f"{name}.weight", (cout, cin, k, k, k), cin * k ** 3)
        if bias:
            self._bias(f"{name}.bias", (cout,))

    def _gate(self, name: str, c_x: int, c_g: int) -> None:
        f_int = max(1, c_x // 2)
        self._weight(f"{name}.w_x", (f_int, c_x, 1, 1, 1), c_x)
        self._weight(f"{name}.w_g", (f_int, c_g, 1, 1, 1), c_g)
        self._bias(f"{name}.b_g", (f_int,))
        self._weight(f"{name}.psi", (1, f_int, 1, 1, 1), f_int)
        self._bias(f"{name}.b_psi", (1,))

    def _build(self) -> None:
        cfg = self.config
        ch = cfg.channels
        for l in range(cfg.levels):
            cin = 1 if l == 0 else ch[l - 1]
            self._conv(f"enc{l}.conv1", cin, ch[l], 3, bias=False)
            self._conv(f"enc{l}.conv2", ch[l], ch[l], 3, bias=False)
        for l in reversed(range(cfg.levels - 1)):
            self._conv(f"up{l}.conv", ch[l + 1], ch[l], 3, bias=False)
            if cfg.use_attention:
                self._gate(f"gate_skip{l}", ch[l], ch[l + 1])
            self._conv(f"dec{l}.conv1", 2 * ch[l], ch[l], 3, bias=False)
            self._conv(f"dec{l}.conv2", ch[l], ch[l], 3, bias=False)
        if cfg.use_attention:
            for l in (cfg.levels - 2, cfg.levels - 3):
                self._gate(f"gate_cls{l}", ch[l], ch[-1])
        if cfg.include_bottleneck_head:
            self._weight("head_bottleneck.weight", (ch[-1], cfg.num_classes), ch[-1])
            self._bias("head_bottleneck.bias", (cfg.num_classes,))
        for l in (cfg.levels - 2, cfg.levels - 3):
            self._weight(f"head_scale{l}.weight", (ch[l], cfg.num_classes), ch[l])
            self._bias(f"head_scale{l}.bias", (cfg.num_classes,))
        if cfg.use_pet_head:
            self._conv("pet_main", ch[0], 1, 1, bias=True)
            for l in range(1, cfg.levels):
                self._conv(f"pet_aux{l}", ch[l], 1, 1, bias=True)

    # -- parameter access ----------------------------------------------------

    def parameter_names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def get_parameter(self, name: str) -> Tensor:
        return self._params[name]

    def set_parameter(self, name: str, tensor: Tensor) -> None:
        current = self._params[name]
        if tensor.shape != current.shape:
            raise ValueError(f"{name}: shape {tensor.shape} != {current.shape}")
        self._params[name] = tensor

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place from a name -> array map."""
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)}, "
                             f"unexpected={sorted(extra)}")
        for name, arr in arrays.items():
            t = self._params[name]
            if arr.shape != t.shape:
                raise ValueError(f"{name}: stored shape {arr.shape} != model shape {t.shape}")
            t.data[...] = arr.astype(t.dtype, copy=False)

    def export_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    @property
    def num_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def astype(self, dtype) -> "UPetModel":
        """A converted copy (fresh parameter tensors) in another precision."""
        other = UPetModel(self.config, self.seed, dtype=dtype)
        for name, t in self._params.items():
            other._params[name] = Tensor(t.data.astype(dtype), dtype=dtype, requires_grad=True)
        return other

    def describe(self) -> str:
        cfg = self.config
        lines = [
            f"network (levels={cfg.levels}, base_channels={cfg.base_channels}, "
            f"input={cfg.input_shape[0]}x{cfg.input_shape[1]}x{cfg.input_shape[2]}, "
            f"attention={'on' if cfg.use_attention else 'off'}, "
            f"pet_head={'on' if cfg.use_pet_head else 'off'})",
            f"{'parameter':40s} {'shape':22s} {'count':>8s}",
        ]
        for name, t in self._params.items():
            lines.append(f"{name:40s} {str(t.shape):22s} {t.size:>8d}")
        lines.append(f"total parameters: {self.num_parameters}")
        return "\n".join(lines)

    # -- forward -------------------------------------------------------------

    def _gate_params(self, prefix: str) -> AttentionGateParams:
        p = self._params
        return AttentionGateParams(
            w_x=p[f"{prefix}.w_x"], w_g=p[f"{prefix}.w_g"], b_g=p[f"{prefix}.b_g"],
            psi=p[f"{prefix}.psi"], b_psi=p[f"{prefix}.b_psi"])

    def _double_conv(self, x: Tensor, prefix: str) -> Tensor:
        p = self._params
        h = ops.conv3d(x, p[f"{prefix}.conv1.weight"], None, stride=1, padding=1)
        h = ops.relu(ops.instance_norm(h))
        h = ops.conv3d(h, p[f"{prefix}.conv2.weight"], None, stride=1, padding=1)
        return ops.relu(ops.instance_norm(h))

    def forward(self, mri: Tensor, skip_scale: float = 1.0) -> ModelOutputs:
        """Run the network on an N,1,D,H,W batch.

        ``skip_scale`` multiplies the pass-through features of a gate-free
        model; it exists to verify the equivalence between a psi=0 gated
        model and the plain variant, and must stay 1.0 when attention is on.
        """
        cfg = self.config
        if mri.dtype != self.dtype:
            raise TypeError(f"input dtype {mri.dtype.__name__} != model dtype {self.dtype.__name__}")
        if mri.data.ndim != 5 or mri.shape[1] != 1:
            raise ValueError(f"expected N,1,D,H,W input, got {mri.shape}")
        if tuple(mri.shape[2:]) != tuple(cfg.input_shape):
            raise ValueError(f"input spatial shape {mri.shape[2:]} != configured {cfg.input_shape}")
        if cfg.use_attention and skip_scale != 1.0:
            raise ValueError("skip_scale applies only to a model without attention gates")

        p = self._params
        feats: list[Tensor] = []
        h = mri
        for l in range(cfg.levels):
            if l > 0:
                h = ops.maxpool3d(h)
            h = self._double_conv(h, f"enc{l}")
            feats.append(h)
        bottleneck = feats[-1]
        attention: dict[str, Tensor] = {}

        def passthrough(t: Tensor) -> Tensor:
            return t if skip_scale == 1.0 else ops.scale(t, skip_scale)

        per_scale: list[Tensor] = []
        if cfg.include_bottleneck_head:
            pooled = ops.global_avg_pool(bottleneck)
            per_scale.append(ops.linear(pooled, p["head_bottleneck.weight"],
                                        p["head_bottleneck.bias"]))
        for l in (cfg.levels - 2, cfg.levels - 3):
            if cfg.use_attention:
                gated, alpha = attention_gate(feats[l], bottleneck, self._gate_params(f"gate_cls{l}"))
                attention[f"cls-{l}"] = alpha
            else:
                gated = passthrough(feats[l])
            pooled = ops.global_avg_pool(gated)
            per_scale.append(ops.linear(pooled, p[f"head_scale{l}.weight"],
                                        p[f"head_scale{l}.bias"]))

        if cfg.aggregate_probabilities:
            terms = [ops.softmax(s) for s in per_scale]
        else:
            terms = per_scale
        acc = terms[0]
        for t in terms[1:]:
            acc = ops.add(acc, t)
        class_logits = ops.scale(acc, 1.0 / len(terms))

        dec = bottleneck
        aux_by_scale: dict[int, Tensor] = {}
        if cfg.use_pet_head:
            aux_by_scale[cfg.levels - 1] = ops.conv3d(
                bottleneck, p[f"pet_aux{cfg.levels - 1}.weight"],
                p[f"pet_aux{cfg.levels - 1}.bias"])
        for l in reversed(range(cfg.levels - 1)):
            g = dec
            up = ops.upsample_trilinear(dec, 2)
            up = ops.relu(ops.instance_norm(
                ops.conv3d(up, p[f"up{l}.conv.weight"], None, stride=1, padding=1)))
            if cfg.use_attention:
                skip, alpha = attention_gate(feats[l], g, self._gate_params(f"gate_skip{l}"))
                attention[f"skip-{l}"] = alpha
            else:
                skip = passthrough(feats[l])
            dec = self._double_conv(ops.concat_channels(up, skip), f"dec{l}")
            if cfg.use_pet_head and l >= 1:
                aux_by_scale[l] = ops.conv3d(dec, p[f"pet_aux{l}.weight"], p[f"pet_aux{l}.bias"])

        pet_pred = None
        aux_list: list[Tensor] = []
        if cfg.use_pet_head:
            pet_pred = ops.conv3d(dec, p["pet_main.weight"], p["pet_main.bias"])
            aux_list = [aux_by_scale[l] for l in range(1, cfg.levels)]

        return ModelOutputs(
            class_logits=class_logits,
            per_scale_logits=per_scale,
            pet_pred=pet_pred,
            aux_pet_preds=aux_list,
            attention_maps=attention,
            input_spatial=tuple(mri.shape[2:]),
        )

    def class_probabilities(self, outputs: ModelOutputs) -> np.ndarray:
        """Per-class probabilities of a forward pass, rows summing to 1."""
        if self.config.aggregate_probabilities:
            return outputs.class_logits.data.copy()
        return ops.softmax(outputs.class_logits).data


def build_model(config: UPetConfig, seed: int, dtype=np.float32) -> UPetModel:
    """Instantiate the network with fan-in scaled uniform weights, zero biases."""
    return UPetModel(config, seed, dtype=dtype)


def export_attention_maps(outputs: ModelOutputs, level_selector=None):
    """Attention coefficient maps as volumes at the input resolution.

    ``level_selector`` filters by gate name: None keeps all, an iterable
    keeps listed names, a callable keeps names it maps to True.  Maps come
    from the first sample of the batch.
    """
    from .data import Volume

    if not outputs.attention_maps:
        raise AttentionUnavailableError(
            "no attention maps: the model was built without attention gates "
            "(use_attention=False)")
    if level_selector is None:
        selected = list(outputs.attention_maps)
    elif callable(level_selector):
        selected = [n for n in outputs.attention_maps if level_selector(n)]
    else:
        wanted = set(level_selector)
        unknown = wanted - set(outputs.attention_maps)
        if unknown:
            raise KeyError(f"unknown gate names {sorted(unknown)}; "
                           f"available: {sorted(outputs.attention_maps)}")
        selected = [n for n in outputs.attention_maps if n in wanted]

    volumes = []
    for name in selected:
        alpha = outputs.attention_maps[name]
        resized = ops.trilinear_resize(alpha, outputs.input_spatial)
        volumes.append(Volume(
            dims=outputs.input_spatial,
            voxel_size_mm=(1.5, 1.5, 1.5),
            modality="ATTN",
            elements=resized.data[0, 0].astype(np.float32, copy=True),
            name=name,
        ))
    return volumes


def permute_config(config: UPetConfig, **changes) -> UPetConfig:
    """A copy of the config with the given fields replaced."""
    return replace(config, **changes)
