"""The convolutional affect recognizer and its spectrogram-input twin.

Architecture: a front end (learned 200/100 conv over the two-channel raw
waveform, or a fixed 129-bin power spectrogram), a stack of higher conv
layers, global average pooling of every conv layer's output, a learned
weighted-average fusion of the pooled vectors, a fully connected layer,
and a softmax (emotion) or sigmoid (personality) head.  All intermediate
nonlinearities are ELU.

Forward passes retain per-layer outputs in a ForwardTrace; the backward
pass and the introspection tooling both consume that trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .audio import AudioSample, PreprocessConfig, prepare_waveform, to_model_channels
from .features import spectrogram
from .numerics import ConvLayerParams, DenseParams, InputTooShortError

SPECTROGRAM_BINS = 129

LayerSpec = tuple[int, int]  # (kernel, stride)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the task fixes the output head."""

    task: str  # "emotion" | "personality"
    front_end: str = "raw"  # "raw" | "spectrogram"
    first_kernel: int = 200
    first_stride: int = 100
    filters: int = 512
    higher_layers: tuple[LayerSpec, ...] = ((8, 2), (4, 2), (4, 2), (4, 2))
    hidden_width: int = 512
    fc_width: int = 512

    def __post_init__(self):
        if self.task not in ("emotion", "personality"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.front_end not in ("raw", "spectrogram"):
            raise ValueError(f"unknown front end {self.front_end!r}")
        if not self.higher_layers:
            raise ValueError("higher_layers must be non-empty")
        if min(self.filters, self.hidden_width, self.fc_width) < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 4 if self.task == "emotion" else 5

    def conv_layer_specs(self) -> list[LayerSpec]:
        """(kernel, stride) of every conv layer, front end included for raw."""
        if self.front_end == "raw":
            return [(self.first_kernel, self.first_stride), *self.higher_layers]
        return list(self.higher_layers)

    def conv_widths(self) -> list[tuple[int, int]]:
        """(in_channels, out_channels) per conv layer."""
        if self.front_end == "raw":
            ins = [2, self.filters] + [self.hidden_width] * (len(self.higher_layers) - 1)
            outs = [self.filters] + [self.hidden_width] * len(self.higher_layers)
        else:
            ins = [SPECTROGRAM_BINS] + [self.hidden_width] * (len(self.higher_layers) - 1)
            outs = [self.hidden_width] * len(self.higher_layers)
        return list(zip(ins, outs))

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "front_end": self.front_end,
            "first_kernel": self.first_kernel,
            "first_stride": self.first_stride,
            "filters": self.filters,
            "higher_layers": [list(ks) for ks in self.higher_layers],
            "hidden_width": self.hidden_width,
            "fc_width": self.fc_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["higher_layers"] = tuple(tuple(ks) for ks in d["higher_layers"])
        return cls(**d)


def spectrogram_variant(config: ModelConfig) -> ModelConfig:
    """Same higher stack, pooling, fusion, fc and head; spectrogram front end."""
    return replace(config, front_end="spectrogram")


def min_input_frames(config: ModelConfig) -> int:
    """Fewest front-end frames for which every conv layer emits >= 1 frame.

    Back-to-front recursion r <- (r - 1) * stride + kernel over the conv
    stack; exact because valid-mode frame counts are floor((F - k)/s) + 1.
    """
    specs = (
        list(config.higher_layers)
        if config.front_end == "spectrogram"
        else config.conv_layer_specs()
    )
    r = 1
    for k, s in reversed(specs):
        r = (r - 1) * s + k
    return r


def min_input_samples(config: ModelConfig) -> int:
    """Minimum waveform length (samples at 8 kHz) the model accepts."""
    if config.front_end == "raw":
        return min_input_frames(config)
    # spectrogram frames map back through the framing of the front end
    return config.first_kernel + config.first_stride * (min_input_frames(config) - 1)


@dataclass
class ModelParams:
    """All learned tensors; shapes are pinned by a ModelConfig."""

    conv: list[ConvLayerParams]
    fusion_weights: list[np.ndarray]  # one matrix per pooled conv layer
    fusion_bias: np.ndarray
    fc: DenseParams
    head: DenseParams

    CONV_TENSORS = ("weights", "bias")

    def tensors(self) -> dict[str, np.ndarray]:
        """Stable name -> array mapping; arrays are shared, not copied."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.conv):
            out[f"conv{i}.weights"] = layer.weights
            out[f"conv{i}.bias"] = layer.bias
        for i, w in enumerate(self.fusion_weights):
            out[f"fusion{i}.weights"] = w
        out["fusion.bias"] = self.fusion_bias
        out["fc.weights"] = self.fc.weights
        out["fc.bias"] = self.fc.bias
        out["head.weights"] = self.head.weights
        out["head.bias"] = self.head.bias
        return out

    def conv_tensor_names(self) -> set[str]:
        return {
            f"conv{i}.{part}"
            for i in range(len(self.conv))
            for part in self.CONV_TENSORS
        }

    def copy(self) -> "ModelParams":
        return ModelParams(
            conv=[
                ConvLayerParams(l.weights.copy(), l.bias.copy(), l.stride)
                for l in self.conv
            ],
            fusion_weights=[w.copy() for w in self.fusion_weights],
            fusion_bias=self.fusion_bias.copy(),
            fc=DenseParams(self.fc.weights.copy(), self.fc.bias.copy()),
            head=DenseParams(self.head.weights.copy(), self.head.bias.copy()),
        )

    @classmethod
    def from_tensors(
        cls, config: ModelConfig, tensors: dict[str, np.ndarray]
    ) -> "ModelParams":
        template = init_params(config, np.random.default_rng(0))
        expected = template.tensors()
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise ValueError(
                f"tensor set mismatch: missing {sorted(missing)}, extra {sorted(extra)}"
            )
        for name, arr in expected.items():
            if tensors[name].shape != arr.shape:
                raise ValueError(
                    f"tensor '{name}' has shape {tensors[name].shape}, "
                    f"expected {arr.shape}"
                )
            arr[...] = tensors[name]
        return template


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fan-in-scaled uniform weights (std 1/sqrt(fan_in)), zero biases.

    Values are snapped to the float32 grid so checkpoints round-trip
    bit-exactly; draws happen in a fixed order for seed reproducibility.
    """

    def uniform(shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        return nx.round_to_float32(rng.uniform(-bound, bound, size=shape))

    specs = config.conv_layer_specs()
    widths = config.conv_widths()
    conv = []
    for (kernel, stride), (cin, cout) in zip(specs, widths):
        conv.append(
            ConvLayerParams(
                weights=uniform((cout, kernel, cin), fan_in=kernel * cin),
                bias=np.zeros(cout),
                stride=stride,
            )
        )
    pooled_widths = [cout for _, cout in widths]
    fusion_weights = [
        uniform((config.hidden_width, w), fan_in=w) for w in pooled_widths
    ]
    fusion_bias = np.zeros(config.hidden_width)
    fc = DenseParams(
        weights=uniform((config.fc_width, config.hidden_width), config.hidden_width),
        bias=np.zeros(config.fc_width),
    )
    head = DenseParams(
        weights=uniform((config.n_outputs, config.fc_width), config.fc_width),
        bias=np.zeros(config.n_outputs),
    )
    return ModelParams(conv, fusion_weights, fusion_bias, fc, head)


@dataclass
class ForwardTrace:
    """Everything one forward pass computed, retained for backward/analysis."""

    layer_outputs: list[np.ndarray]  # post-ELU conv outputs (may be empty)
    pooled: list[np.ndarray]
    fused: np.ndarray
    fc_out: np.ndarray
    logits: np.ndarray
    output: np.ndarray  # probabilities (emotion) or trait scores (personality)


def forward(
    params: ModelParams,
    config: ModelConfig,
    x: np.ndarray,
    keep_layer_outputs: bool = True,
) -> ForwardTrace:
    """Run the full stack on a (frames, channels) input.

    Raw front end expects (frames, 2); spectrogram front end expects
    (frames, 129).  Inputs shorter than the stack's receptive field are
    rejected with the minimum reported.
    """
    x = np.asarray(x, dtype=np.float64)
    expected_ch = 2 if config.front_end == "raw" else SPECTROGRAM_BINS
    if x.ndim != 2 or x.shape[1] != expected_ch:
        raise ValueError(
            f"expected input of shape (frames, {expected_ch}), got {x.shape}"
        )
    need = min_input_frames(config)
    unit = "samples" if config.front_end == "raw" else "frames"
    if x.shape[0] < need:
        raise InputTooShortError(x.shape[0], need, unit=unit)

    outputs = []
    h = x
    for layer in params.conv:
        h = nx.elu(nx.conv1d_forward(h, layer))
        outputs.append(h)
    pooled = [nx.global_average_pool(o) for o in outputs]
    fused = nx.weighted_average_fusion(pooled, params.fusion_weights, params.fusion_bias)
    fc_out = nx.elu(nx.dense(fused, params.fc))
    logits = nx.dense(fc_out, params.head)
    output = nx.softmax(logits) if config.task == "emotion" else nx.sigmoid(logits)
    return ForwardTrace(
        layer_outputs=outputs if keep_layer_outputs else [],
        pooled=pooled,
        fused=fused,
        fc_out=fc_out,
        logits=logits,
        output=output,
    )


def loss_and_grad_logits(
    trace: ForwardTrace, target, task: str
) -> tuple[float, np.ndarray]:
    """Task loss plus its gradient w.r.t. the head logits (fused form)."""
    if task == "emotion":
        loss = nx.cross_entropy_loss(trace.output, target)
        grad = nx.cross_entropy_grad_logits(trace.output, target)
    else:
        target = np.asarray(target, dtype=np.float64)
        loss = nx.mse_loss(trace.output, target)
        p = trace.output
        grad = nx.mse_grad(p, target) * p * (1.0 - p)
    return loss, grad


def backward(
    params: ModelParams,
    config: ModelConfig,
    x: np.ndarray,
    trace: ForwardTrace,
    grad_logits: np.ndarray,
    freeze_conv: bool = False,
) -> dict[str, np.ndarray]:
    """Gradients of the scalar loss behind grad_logits w.r.t. every tensor.

    With freeze_conv the chain stops at the pooled vectors and only
    fusion/fc/head gradients are returned (the fine-tuning path).
    """
    if not trace.layer_outputs:
        raise ValueError("backward needs a trace with retained layer outputs")
    grads: dict[str, np.ndarray] = {}

    grads["head.weights"] = np.outer(grad_logits, trace.fc_out)
    grads["head.bias"] = grad_logits
    g_fc_out = params.head.weights.T @ grad_logits

    g_fc_pre = g_fc_out * nx.elu_grad_from_output(trace.fc_out)
    grads["fc.weights"] = np.outer(g_fc_pre, trace.fused)
    grads["fc.bias"] = g_fc_pre
    g_fused = params.fc.weights.T @ g_fc_pre

    g_fusion_pre = g_fused * nx.elu_grad_from_output(trace.fused)
    grads["fusion.bias"] = g_fusion_pre
    g_pooled = []
    for i, (w, p) in enumerate(zip(params.fusion_weights, trace.pooled)):
        grads[f"fusion{i}.weights"] = np.outer(g_fusion_pre, p)
        g_pooled.append(w.T @ g_fusion_pre)

    if freeze_conv:
        return grads

    n_layers = len(params.conv)
    g_out = None
    for l in range(n_layers - 1, -1, -1):
        out = trace.layer_outputs[l]
        pooled_part = nx.global_average_pool_backward(g_pooled[l], out.shape[0])
        g_out = pooled_part if g_out is None else g_out + pooled_part
        g_pre = g_out * nx.elu_grad_from_output(out)
        layer_input = x if l == 0 else trace.layer_outputs[l - 1]
        g_in, g_w, g_b = nx.conv1d_backward(layer_input, params.conv[l], g_pre)
        grads[f"conv{l}.weights"] = g_w
        grads[f"conv{l}.bias"] = g_b
        g_out = g_in
    return grads


def input_from_waveform(config: ModelConfig, sample: AudioSample) -> np.ndarray:
    """Model input for an already-preprocessed (8 kHz, scaled) sample."""
    if config.front_end == "raw":
        return to_model_channels(sample)
    return spectrogram(sample, config.first_kernel, config.first_stride).power


def predict(
    params: ModelParams,
    config: ModelConfig,
    sample: AudioSample,
    pre_cfg: PreprocessConfig | None = None,
) -> np.ndarray:
    """Evaluation-path inference: class probabilities or trait scores.

    Augmentation is asserted off; the pipeline is deterministic.
    """
    pre_cfg = pre_cfg or PreprocessConfig()
    if pre_cfg.augment:
        raise ValueError("prediction must run with augmentation disabled")
    prepared = prepare_waveform(sample, pre_cfg)
    n = prepared.waveform.shape[0]
    need = min_input_samples(config)
    if n < need:
        raise InputTooShortError(n, need, unit="samples")
    x = input_from_waveform(config, prepared)
    return forward(params, config, x, keep_layer_outputs=False).output
