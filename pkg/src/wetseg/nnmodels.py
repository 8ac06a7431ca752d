"""Convolutional autoencoder and U-Net sharing one encoder layout.

Both models name their encoder parameters identically
(``encoder.block{i}.conv{1,2}.{weight,bias}`` and ``bridge.conv{1,2}.*``), so
pretrained autoencoder weights can be copied into a U-Net by name.

A block is conv3x3 -> ReLU -> conv3x3 -> ReLU -> dropout with "same" padding.
The encoder applies ``depth`` blocks with channel widths ``base * 2**i``, each
followed by 2x max-pooling, then the bridge block. Decoders upsample by
nearest neighbour and run a block per level; the U-Net concatenates the
matching encoder output (skip) before each decoder block.

Closed-form parameter counts, with ``blk(a, b) = 9ab + b + 9b^2 + b`` and
``c_i = base * 2**i`` (``c_-1 = in_channels``, ``B = bridge_channels``)::

    encoder  = sum_i blk(c_{i-1}, c_i) + blk(c_{D-1}, B)
    AE       = encoder + blk(B, c_{D-1}) + sum_{i<D-1} blk(c_{i+1}, c_i) + c_0*in + in
    U-Net    = encoder + blk(B + c_{D-1}, c_{D-1}) + sum_{i<D-1} blk(c_{i+1} + c_i, c_i)
               + c_0*K + K
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from wetseg import tensorcore as tc
from wetseg.errors import CheckpointError, TransferError

CHECKPOINT_MAGIC = b"WSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AutoencoderSpec:
    in_channels: int = 9
    base_channels: int = 64
    depth: int = 4
    bridge_channels: int = 512
    dropout_p: float = 0.15
    upsample: str = "nearest"

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1 or self.bridge_channels < 1:
            raise ValueError(f"invalid model spec {self}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.upsample != "nearest":
            raise ValueError(f"upsample mode {self.upsample!r} not implemented (only 'nearest')")

    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UNetSpec(AutoencoderSpec):
    num_classes: int = 9

    def __post_init__(self):
        super().__post_init__()
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    def encoder_spec(self) -> AutoencoderSpec:
        return AutoencoderSpec(**{f.name: getattr(self, f.name) for f in fields(AutoencoderSpec)})


def _block_count(cin: int, cout: int) -> int:
    return 9 * cin * cout + cout + 9 * cout * cout + cout


def expected_parameter_count(spec: AutoencoderSpec) -> int:
    c = spec.encoder_channels()
    ins = [spec.in_channels] + c[:-1]
    total = sum(_block_count(a, b) for a, b in zip(ins, c)) + _block_count(c[-1], spec.bridge_channels)
    if isinstance(spec, UNetSpec):
        total += _block_count(spec.bridge_channels + c[-1], c[-1])
        total += sum(_block_count(c[i + 1] + c[i], c[i]) for i in range(spec.depth - 1))
        total += c[0] * spec.num_classes + spec.num_classes
    else:
        total += _block_count(spec.bridge_channels, c[-1])
        total += sum(_block_count(c[i + 1], c[i]) for i in range(spec.depth - 1))
        total += c[0] * spec.in_channels + spec.in_channels
    return total


def is_encoder_param(name: str) -> bool:
    return name.startswith("encoder.") or name.startswith("bridge.")


class _ConvNet:
    kind = ""

    def __init__(self, spec: AutoencoderSpec, seed: int = 0):
        self.spec = spec
        self.params = tc.ParamStore()
        self.dropout_rng = np.random.default_rng([seed, 1])
        self._init_rng = np.random.default_rng([seed, 0])
        self._build()
        del self._init_rng

    def _conv(self, name: str, cin: int, cout: int, k: int = 3) -> None:
        bound = np.sqrt(6.0 / (cin * k * k))  # He-uniform
        self.params.add(f"{name}.weight", self._init_rng.uniform(-bound, bound, size=(cout, cin, k, k)))
        self.params.add(f"{name}.bias", np.zeros(cout))

    def _block(self, name: str, cin: int, cout: int) -> None:
        self._conv(f"{name}.conv1", cin, cout)
        self._conv(f"{name}.conv2", cout, cout)

    def _build_encoder(self) -> None:
        prev = self.spec.in_channels
        for i, ch in enumerate(self.spec.encoder_channels()):
            self._block(f"encoder.block{i}", prev, ch)
            prev = ch
        self._block("bridge", prev, self.spec.bridge_channels)

    def _apply_block(self, name: str, x: tc.Tensor, training: bool) -> tc.Tensor:
        p = self.params
        x = tc.relu(tc.conv2d(x, p[f"{name}.conv1.weight"], p[f"{name}.conv1.bias"], padding=1))
        x = tc.relu(tc.conv2d(x, p[f"{name}.conv2.weight"], p[f"{name}.conv2.bias"], padding=1))
        return tc.dropout(x, self.spec.dropout_p, training, self.dropout_rng)

    def _check_input(self, x) -> tc.Tensor:
        x = tc.as_tensor(x)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected N x {self.spec.in_channels} x H x W input, got {x.shape}")
        step = 2 ** self.spec.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by 2^depth={step}")
        return x

    def encode(self, x, training: bool = False) -> tuple[list[tc.Tensor], tc.Tensor]:
        """Run the shared encoder; returns (per-level block outputs, bridge)."""
        h = self._check_input(x)
        skips = []
        for i in range(self.spec.depth):
            h = self._apply_block(f"encoder.block{i}", h, training)
            skips.append(h)
            h = tc.maxpool2(h)
        return skips, self._apply_block("bridge", h, training)

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def encoder_names(self) -> list[str]:
        return [n for n in self.params.names() if is_encoder_param(n)]


class Autoencoder(_ConvNet):
    kind = "autoencoder"

    def _build(self) -> None:
        self._build_encoder()
        prev = self.spec.bridge_channels
        chans = self.spec.encoder_channels()
        for i in reversed(range(self.spec.depth)):
            self._block(f"decoder.block{i}", prev, chans[i])
            prev = chans[i]
        self._conv("head", prev, self.spec.in_channels, k=1)

    def forward(self, x, training: bool = False) -> tc.Tensor:
        _, h = self.encode(x, training)
        for i in reversed(range(self.spec.depth)):
            h = self._apply_block(f"decoder.block{i}", tc.upsample2(h), training)
        return tc.sigmoid(tc.conv2d(h, self.params["head.weight"], self.params["head.bias"]))

    __call__ = forward


class UNet(_ConvNet):
    kind = "unet"

    def _build(self) -> None:
        self._build_encoder()
        prev = self.spec.bridge_channels
        chans = self.spec.encoder_channels()
        for i in reversed(range(self.spec.depth)):
            self._block(f"decoder.block{i}", prev + chans[i], chans[i])
            prev = chans[i]
        self._conv("head", prev, self.spec.num_classes, k=1)

    def forward(self, x, training: bool = False) -> tc.Tensor:
        """Per-pixel class logits, N x num_classes x H x W."""
        skips, h = self.encode(x, training)
        for i in reversed(range(self.spec.depth)):
            h = tc.concat_channels(skips[i], tc.upsample2(h))
            h = self._apply_block(f"decoder.block{i}", h, training)
        return tc.conv2d(h, self.params["head.weight"], self.params["head.bias"])

    __call__ = forward


def build_autoencoder(spec: AutoencoderSpec, seed: int = 0) -> Autoencoder:
    return Autoencoder(spec, seed)


def build_unet(spec: UNetSpec, seed: int = 0) -> UNet:
    return UNet(spec, seed)


# checkpoints -----------------------------------------------------------------


@dataclass
class ModelCheckpoint:
    kind: str
    spec: dict
    tensors: dict[str, np.ndarray]
    provenance: dict
    version: int = CHECKPOINT_VERSION

    def build(self, expected_kind: str | None = None):
        """Instantiate the model this checkpoint describes and load its weights."""
        if expected_kind is not None and self.kind != expected_kind:
            raise CheckpointError(f"checkpoint holds a {self.kind!r} model, expected {expected_kind!r}")
        if self.kind == "autoencoder":
            model = Autoencoder(AutoencoderSpec(**self.spec))
        elif self.kind == "unet":
            model = UNet(UNetSpec(**self.spec))
        else:
            raise CheckpointError(f"unknown model kind {self.kind!r}")
        try:
            model.params.load_state_dict(self.tensors, strict=True)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not match its spec: {exc}") from None
        return model


def checkpoint_from_model(model: _ConvNet, provenance: dict | None = None) -> ModelCheckpoint:
    return ModelCheckpoint(model.kind, model.spec.to_dict(), model.params.state_dict(), dict(provenance or {}))


def encode_checkpoint(ckpt: ModelCheckpoint) -> bytes:
    header = json.dumps({"kind": ckpt.kind, "spec": ckpt.spec, "provenance": ckpt.provenance},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", ckpt.version, len(header)), header,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> ModelCheckpoint:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {buf[:4]!r}, not a checkpoint")
    try:
        version, hlen = struct.unpack_from("<HI", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{source}: checkpoint version {version} unsupported "
                                  f"(expected {CHECKPOINT_VERSION})")
        pos = 10
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{source}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt checkpoint: {exc}") from None
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes after tensors")
    return ModelCheckpoint(header["kind"], header["spec"], tensors, header.get("provenance", {}), version)


def save_checkpoint(ckpt, path) -> None:
    if not isinstance(ckpt, ModelCheckpoint):
        ckpt = checkpoint_from_model(ckpt)
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path, expected_kind: str | None = None) -> ModelCheckpoint:
    ckpt = decode_checkpoint(Path(path).read_bytes(), str(path))
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise CheckpointError(f"{path}: checkpoint holds a {ckpt.kind!r} model, expected {expected_kind!r}")
    return ckpt


def transfer_encoder(source, unet: UNet, freeze: bool = False) -> UNet:
    """Copy encoder and bridge weights from an autoencoder (model or checkpoint) into ``unet``.

    Decoder and head parameters are left untouched. With ``freeze`` the copied
    parameters are excluded from optimiser updates.
    """
    tensors = source.tensors if isinstance(source, ModelCheckpoint) else source.params.state_dict()
    src_names = {n for n in tensors if is_encoder_param(n)}
    dst_names = set(unet.encoder_names())
    if src_names != dst_names:
        raise TransferError(f"encoder parameter names differ: only in source {sorted(src_names - dst_names)}, "
                            f"only in U-Net {sorted(dst_names - src_names)}")
    for name in unet.encoder_names():
        if tensors[name].shape != unet.params[name].shape:
            raise TransferError(f"shape mismatch for {name}: source {tensors[name].shape} vs "
                                f"U-Net {unet.params[name].shape}")
    for name in unet.encoder_names():
        unet.params[name].data = np.array(tensors[name], dtype=unet.params[name].dtype, copy=True)
    if freeze:
        unet.params.frozen.update(dst_names)
    return unet
