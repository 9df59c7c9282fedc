"""Full segmentation model: pyramid encoder feeding the locality decoder."""

from __future__ import annotations

import numpy as np

from .decoder import Decoder, PLDConfig
from .encoder import Encoder, EncoderConfig, SMALL, TINY
from .errors import FormatError, ShapeMismatch
from .rng import Rng
from . import tensor as T

SCALES: dict[str, EncoderConfig] = {"tiny": TINY, "small": SMALL}


class SSFormer:
    def __init__(self, scale: str = "tiny", pld: PLDConfig | None = None,
                 seed: int = 0, dtype=np.float32):
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}, expected one of {sorted(SCALES)}")
        self.scale = scale
        self.pld_cfg = pld if pld is not None else PLDConfig()
        rng = Rng(seed)
        self.encoder = Encoder(SCALES[scale], rng)
        self.decoder = Decoder(SCALES[scale].stage_dims, self.pld_cfg, rng)
        if dtype != np.float32:
            for _, t in self.named_params().items():
                t.data = t.data.astype(dtype)

    def forward(self, x: T.Tensor, trace: dict | None = None) -> T.Tensor:
        feats = self.encoder.forward(x)
        return self.decoder.forward(feats, trace)

    def named_params(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {}
        for name, t in self.encoder.params():
            out[name] = t
        for name, t in self.decoder.params():
            out[name] = t
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_params()
        for name, t in params.items():
            if name not in state:
                raise FormatError(f"checkpoint missing tensor {name}")
            arr = state[name]
            if tuple(arr.shape) != t.shape:
                raise ShapeMismatch(f"{name}: checkpoint {tuple(arr.shape)} vs model {t.shape}")
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)
        extra = set(state) - set(params)
        if extra:
            raise FormatError(f"checkpoint has unknown tensors: {sorted(extra)[:3]}")
