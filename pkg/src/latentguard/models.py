"""Classifier and encoder-decoder models with per-layer activation taps.

The classifier is an explicit ordered list of stages so that any stage output
can be tapped, an encoder-decoder can be spliced in after stage N, and the
remaining stages can be re-run from an arbitrary activation. All forward and
gradient operations are pure functions of (parameters, input); training is the
only writer of parameters.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .data import ImageBatch


def _pixels_of(x) -> torch.Tensor:
    return x.pixels if isinstance(x, ImageBatch) else x


class LayeredClassifier(nn.Module):
    """A classifier assembled from an ordered stage list.

    Stage indices are 1-based in the public helpers below: the output of stage
    N is the activation "at layer N". The final stage produces logits of shape
    (batch, num_classes).
    """

    def __init__(self, stages: list[nn.Module], num_classes: int,
                 input_shape: tuple[int, int, int], arch: dict | None = None):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.arch = arch or {}

    @property
    def num_layers(self) -> int:
        return len(self.stages)

    def check_input(self, pixels: torch.Tensor) -> None:
        if pixels.dim() != 4 or tuple(pixels.shape[1:]) != self.input_shape:
            raise ValueError(
                f"input shape {tuple(pixels.shape)} does not match model input "
                f"(batch, {', '.join(str(d) for d in self.input_shape)})"
            )

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        self.check_input(pixels)
        out = pixels
        for stage in self.stages:
            out = stage(out)
        return out

    def run_from(self, activation: torch.Tensor, after_stage: int) -> torch.Tensor:
        """Run stages after_stage+1..L on an activation tapped at after_stage."""
        if not 0 <= after_stage <= self.num_layers:
            raise ValueError(f"stage index {after_stage} outside [0, {self.num_layers}]")
        out = activation
        for stage in self.stages[after_stage:]:
            out = stage(out)
        return out

    def run_to(self, pixels: torch.Tensor, stage: int) -> torch.Tensor:
        """Activation after stages 1..stage."""
        if not 1 <= stage <= self.num_layers:
            raise ValueError(f"stage index {stage} outside [1, {self.num_layers}]")
        self.check_input(pixels)
        out = pixels
        for s in self.stages[:stage]:
            out = s(out)
        return out

    def stage_output_shape(self, stage: int) -> tuple[int, ...]:
        """Shape (without batch dim) of the activation produced by a stage."""
        dtype = next((p.dtype for p in self.parameters()), torch.float32)
        with torch.no_grad():
            probe = torch.zeros((1, *self.input_shape), dtype=dtype)
            for s in self.stages[:stage]:
                probe = s(probe)
        return tuple(probe.shape[1:])

    def freeze(self) -> "LayeredClassifier":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def _conv_block(c_in: int, c_out: int, pool: bool) -> nn.Module:
    layers: list[nn.Module] = [nn.Conv2d(c_in, c_out, kernel_size=3, padding=1), nn.ReLU()]
    if pool:
        layers.append(nn.MaxPool2d(2))
    return nn.Sequential(*layers)


def mnist_classifier(num_classes: int = 10) -> LayeredClassifier:
    """4 conv layers (32, 32, 64, 64; 3x3 kernels, pooling after 2 and 4) + dense head."""
    widths = (32, 32, 64, 64)
    stages: list[nn.Module] = []
    c_in = 1
    for i, w in enumerate(widths):
        stages.append(_conv_block(c_in, w, pool=(i % 2 == 1)))
        c_in = w
    head = nn.Sequential(nn.Flatten(), nn.Linear(64 * 7 * 7, 128), nn.ReLU(),
                         nn.Linear(128, num_classes))
    stages.append(head)
    return LayeredClassifier(stages, num_classes, (1, 28, 28),
                             arch={"family": "mnist", "widths": list(widths)})


def svhn_classifier(num_classes: int = 10) -> LayeredClassifier:
    """8 conv layers in four width-doubling pairs (32..256) + dense head."""
    widths = (32, 32, 64, 64, 128, 128, 256, 256)
    stages: list[nn.Module] = []
    c_in = 3
    for i, w in enumerate(widths):
        stages.append(_conv_block(c_in, w, pool=(i % 2 == 1)))
        c_in = w
    head = nn.Sequential(nn.Flatten(), nn.Linear(256 * 2 * 2, 256), nn.ReLU(),
                         nn.Linear(256, num_classes))
    stages.append(head)
    return LayeredClassifier(stages, num_classes, (3, 32, 32),
                             arch={"family": "svhn", "widths": list(widths)})


def build_classifier(family: str, num_classes: int = 10) -> LayeredClassifier:
    if family == "mnist":
        return mnist_classifier(num_classes)
    if family == "svhn":
        return svhn_classifier(num_classes)
    raise ValueError(f"unknown classifier family {family!r}")


def make_latent_encoder(activation_shape: tuple[int, ...], latent_dim: int,
                        hidden: int = 128) -> nn.Module:
    """Flatten -> hidden dense layer -> dense projection to the latent space."""
    flat = math.prod(activation_shape)
    return nn.Sequential(
        nn.Flatten(), nn.Linear(flat, hidden), nn.ReLU(), nn.Linear(hidden, latent_dim)
    )


class EncoderDecoder(nn.Module):
    """Projects a tapped activation into a low-dimensional latent space and back.

    The encoder flattens the activation and maps it through one hidden dense
    layer to a latent vector of size ``latent_dim``; the decoder mirrors it and
    restores the activation shape exactly.
    """

    def __init__(self, tap: int, activation_shape: tuple[int, ...],
                 latent_dim: int, hidden: int = 128):
        super().__init__()
        self.tap = tap
        self.activation_shape = tuple(activation_shape)
        self.latent_dim = latent_dim
        self.hidden = hidden
        flat = math.prod(activation_shape)
        self.encoder = make_latent_encoder(activation_shape, latent_dim, hidden)
        self.decoder = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(), nn.Linear(hidden, flat),
            nn.Unflatten(1, self.activation_shape),
        )

    def encode(self, activation: torch.Tensor) -> torch.Tensor:
        if tuple(activation.shape[1:]) != self.activation_shape:
            raise ValueError(
                f"activation shape {tuple(activation.shape[1:])} does not match "
                f"encoder tap shape {self.activation_shape}"
            )
        return self.encoder(activation)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[-1] != self.latent_dim:
            raise ValueError(f"latent dim {latent.shape[-1]} != {self.latent_dim}")
        return self.decoder(latent)

    def forward(self, activation: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(activation))

    def freeze(self) -> "EncoderDecoder":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def encoder_for(model: LayeredClassifier, tap: int, latent_dim: int,
                hidden: int = 128) -> EncoderDecoder:
    return EncoderDecoder(tap, model.stage_output_shape(tap), latent_dim, hidden=hidden)


class DefendedPath(nn.Module):
    """Classifier forward path with an optional encoder-decoder spliced in."""

    def __init__(self, model: LayeredClassifier, encdec: EncoderDecoder | None = None):
        super().__init__()
        self.model = model
        self.encdec = encdec
        if encdec is not None and not 1 <= encdec.tap <= model.num_layers:
            raise ValueError(f"tap {encdec.tap} outside [1, {model.num_layers}]")

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        return self.forward_with_latent(pixels)[0]

    def forward_with_latent(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor | None]:
        if self.encdec is None:
            return self.model(pixels), None
        self.model.check_input(pixels)
        out = pixels
        for stage in self.model.stages[: self.encdec.tap]:
            out = stage(out)
        latent = self.encdec.encode(out)
        out = self.encdec.decode(latent)
        return self.model.run_from(out, self.encdec.tap), latent


def forward(model: LayeredClassifier, x: ImageBatch | torch.Tensor) -> torch.Tensor:
    """Logits for a batch; deterministic given (parameters, input)."""
    return model(_pixels_of(x))


def forward_with_taps(model: LayeredClassifier, x: ImageBatch | torch.Tensor,
                      tap_layers) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
    """Logits plus the exact stage outputs at the requested 1-based layers."""
    taps = set(tap_layers)
    for t in taps:
        if not 1 <= t <= model.num_layers:
            raise ValueError(f"tap index {t} outside [1, {model.num_layers}]")
    pixels = _pixels_of(x)
    model.check_input(pixels)
    out = pixels
    activations: dict[int, torch.Tensor] = {}
    for i, stage in enumerate(model.stages, start=1):
        out = stage(out)
        if i in taps:
            activations[i] = out
    return out, activations


def forward_through(model: LayeredClassifier, encdec: EncoderDecoder,
                    x: ImageBatch | torch.Tensor) -> torch.Tensor:
    """Logits with the encoder-decoder inserted after its tap layer."""
    return DefendedPath(model, encdec)(_pixels_of(x))


def predict(path: nn.Module, x: ImageBatch | torch.Tensor) -> torch.Tensor:
    """Predicted classes; argmax ties resolve to the lowest class index."""
    logits = path(_pixels_of(x))
    return logits.argmax(dim=1)


def parameter_fingerprint(module: nn.Module) -> str:
    """Order-sensitive digest of all parameter bytes; bitwise change detector."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
