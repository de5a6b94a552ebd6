"""Deterministic feature stacks standing in for pretrained encoders.

The usual extraction recipe runs clips through large pretrained audio
and image models. Those weights cannot be shipped with this tool, so the
built-in backend computes fixed handcrafted descriptors instead and
mixes them through seeded constant projections to the same widths: 128
per audio second, 512 per frame or patch cell. Nothing is learned and
nothing is downloaded; identical media yields identical features.

Audio: 64-band log-mel spectrogram (25 ms windows, 10 ms hop, 125 to
7500 Hz), band means and deviations over the second, orthogonal mix.
Image regions: color moments, gray histogram, gradient orientation
histogram, and low-frequency DCT coefficients, Gaussian projection,
unit-normalized.
"""

import numpy as np

from .errors import DependencyError

D_AUDIO = 128
D_VISUAL = 512

_MEL_BANDS = 64
_WIN = 400       # 25 ms at 16 kHz
_HOP = 160       # 10 ms
_DESC = 68       # handcrafted image descriptor width


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bands, n_fft, sample_rate, fmin=125.0, fmax=7500.0):
    """Triangular filters (n_bands, n_fft // 2 + 1), peak-normalized."""
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax),
                                   n_bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    bank = np.zeros((n_bands, freqs.size))
    for b in range(n_bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _frame_signal(x, win, hop):
    n = 1 + max(0, (x.shape[0] - win)) // hop
    out = np.empty((n, win))
    for i in range(n):
        out[i] = x[i * hop:i * hop + win]
    return out


def _unit(v, axis=-1):
    return v / np.maximum(np.linalg.norm(v, axis=axis, keepdims=True), 1e-12)


class BuiltinEmbedder:
    """Constant-weight descriptor stacks; see the module docstring."""

    name = "builtin"

    def __init__(self, sample_rate=16_000):
        self.sample_rate = sample_rate
        self.bank = mel_filterbank(_MEL_BANDS, _WIN, sample_rate)
        self.window = np.hanning(_WIN)
        rng = np.random.default_rng(90_210)
        mix, _ = np.linalg.qr(rng.normal(size=(D_AUDIO, D_AUDIO)))
        self.audio_mix = mix
        self.proj_frame = rng.normal(0.0, 1.0 / np.sqrt(_DESC),
                                     (_DESC, D_VISUAL))
        self.proj_patch = rng.normal(0.0, 1.0 / np.sqrt(_DESC),
                                     (_DESC, D_VISUAL))

    # ----- audio ----------------------------------------------------------

    def audio_segment(self, samples):
        """One second of mono audio -> (128,) float32."""
        x = np.asarray(samples, dtype=np.float64)
        if x.shape != (self.sample_rate,):
            raise ValueError(f"expected ({self.sample_rate},), got {x.shape}")
        frames = _frame_signal(x, _WIN, _HOP) * self.window
        power = np.abs(np.fft.rfft(frames, axis=-1)) ** 2
        mel = np.log(power @ self.bank.T + 1e-6)
        feats = np.concatenate([mel.mean(axis=0), mel.std(axis=0)])
        return _unit(feats @ self.audio_mix).astype(np.float32)

    # ----- image ----------------------------------------------------------

    def _descriptor(self, region):
        import cv2
        from scipy.fft import dctn
        img = region.astype(np.float64) / 255.0
        gray = img @ np.array([0.299, 0.587, 0.114])
        parts = [img.mean(axis=(0, 1)), img.std(axis=(0, 1))]
        hist, _ = np.histogram(gray, bins=16, range=(0.0, 1.0))
        parts.append(hist / max(gray.size, 1))
        gy, gx = np.gradient(gray)
        mag = np.hypot(gx, gy)
        ang = np.arctan2(gy, gx)
        ohist, _ = np.histogram(ang, bins=8, range=(-np.pi, np.pi),
                                weights=mag)
        parts.append(ohist / max(mag.sum(), 1e-12))
        parts.append(np.array([mag.mean(), mag.std()]))
        small = cv2.resize(gray, (16, 16), interpolation=cv2.INTER_AREA)
        parts.append(dctn(small, norm="ortho")[:6, :6].ravel())
        out = np.concatenate(parts)
        assert out.shape == (_DESC,)
        return out

    def frame(self, image):
        """(H, W, 3) uint8 -> (512,) float32."""
        return _unit(self._descriptor(image) @ self.proj_frame).astype(
            np.float32)

    def patch_grid(self, image, grid):
        """(H, W, 3) uint8 -> (grid*grid, 512) float32, row-major cells."""
        rows = np.array_split(image, grid, axis=0)
        feats = []
        for r in rows:
            for cell in np.array_split(r, grid, axis=1):
                feats.append(self._descriptor(cell) @ self.proj_patch)
        return _unit(np.stack(feats)).astype(np.float32)


_BACKENDS = {"builtin": BuiltinEmbedder}


def load_backend(name="builtin", sample_rate=16_000):
    """Instantiate an embedding backend; DependencyError when absent."""
    try:
        cls = _BACKENDS[name]
    except KeyError:
        raise DependencyError(
            f"no embedding backend named {name!r}; available: "
            f"{sorted(_BACKENDS)}") from None
    return cls(sample_rate=sample_rate)
