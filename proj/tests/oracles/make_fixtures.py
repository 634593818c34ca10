"""Regenerates tests/data/*.json from independent Python references.

Images come from a splitmix64 stream that the C++ tests reproduce
(tests/support/fixture_images.hpp), so only seeds and reference values are
stored.

    python3 tests/oracles/make_fixtures.py
"""
import json
import pathlib

import numpy as np
from scipy import signal, stats
from skimage.metrics import structural_similarity

MASK = (1 << 64) - 1
OUT = pathlib.Path(__file__).resolve().parent.parent / "data"
SCALE = 9 * 65535


class SplitMix:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


def box_sums(seed, size):
    g = SplitMix(seed)
    raw = np.array([g.next() >> 48 for _ in range((size + 2) ** 2)], dtype=np.int64)
    raw = raw.reshape(size + 2, size + 2)
    s = np.zeros((size, size), dtype=np.int64)
    for dr in range(3):
        for dc in range(3):
            s += raw[dr:dr + size, dc:dc + size]
    return s


def fixture_pair(seed, size, noise_shift):
    """Target y and a noisy estimate; both exact multiples of 1/(9*65535)."""
    s = box_sums(seed, size)
    g = SplitMix(seed ^ 0xABCDEF)
    half = 1 << (63 - noise_shift)
    noise = np.array([(g.next() >> noise_shift) - half for _ in range(size * size)],
                     dtype=np.int64).reshape(size, size)
    t = np.clip(s + noise, 0, SCALE)
    return s / SCALE, t / SCALE


def vifp_reference(ref, dist, sigma_nsq=2.0, pixel_scale=255.0):
    """Pixel-domain multiscale VIF, transcribed from the original MATLAB vifp_mscale."""
    ref = ref.astype(np.float64) * pixel_scale
    dist = dist.astype(np.float64) * pixel_scale
    eps = 1e-10
    num = 0.0
    den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        sd = n / 5.0
        ax = np.arange(n) - (n - 1) / 2.0
        xx, yy = np.meshgrid(ax, ax)
        win = np.exp(-(xx ** 2 + yy ** 2) / (2 * sd * sd))
        win /= win.sum()
        if scale > 1:
            ref = signal.correlate2d(ref, win, mode="valid")[::2, ::2]
            dist = signal.correlate2d(dist, win, mode="valid")[::2, ::2]
        mu1 = signal.correlate2d(ref, win, mode="valid")
        mu2 = signal.correlate2d(dist, win, mode="valid")
        s1 = signal.correlate2d(ref * ref, win, mode="valid") - mu1 * mu1
        s2 = signal.correlate2d(dist * dist, win, mode="valid") - mu2 * mu2
        s12 = signal.correlate2d(ref * dist, win, mode="valid") - mu1 * mu2
        s1[s1 < 0] = 0
        s2[s2 < 0] = 0
        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        m = s1 < eps
        g[m] = 0
        sv[m] = s2[m]
        s1[m] = 0
        m = s2 < eps
        g[m] = 0
        sv[m] = 0
        m = g < 0
        sv[m] = s2[m]
        g[m] = 0
        sv[sv <= eps] = eps
        num += np.sum(np.log10(1 + g * g * s1 / (sv + sigma_nsq)))
        den += np.sum(np.log10(1 + s1 / sigma_nsq))
    return num / den


def ssim_reference(y, yh):
    return structural_similarity(y, yh, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False)


def metric_pairs():
    pairs = []
    for i in range(50):
        seed = 1000 + i
        shift = 45 + (i % 5)
        y, yh = fixture_pair(seed, 64, shift)
        e = float(np.mean((y - yh) ** 2))
        pairs.append({
            "seed": seed,
            "noise_shift": shift,
            "mse": e,
            "psnr": float(10 * np.log10(y.max() ** 2 / e)),
            "ssim": float(ssim_reference(y, yh)),
            "vif": float(vifp_reference(y, yh)),
        })
    # pinned cases
    y, _ = fixture_pair(7, 64, 48)
    blurred = np.zeros((60, 60))
    for dr in range(5):
        for dc in range(5):
            blurred += y[dr:dr + 60, dc:dc + 60]
    blurred /= 25
    yc = y[2:62, 2:62]
    checker = np.indices((64, 64)).sum(axis=0) // 4 % 2 * 0.8 + 0.1
    pins = {
        "blur_seed": 7,
        "vif_box5_blur": float(vifp_reference(yc, blurred)),
        "ssim_box5_blur": float(ssim_reference(yc, blurred)),
        "ssim_checker_vs_inverse": float(ssim_reference(checker, 1 - checker)),
    }
    return {"size": 64, "pairs": pairs, "pins": pins}


def kruskal_sets():
    rng = np.random.default_rng(20240601)
    sets = []
    for i in range(100):
        k = int(rng.integers(2, 6))
        groups = []
        for _ in range(k):
            n = int(rng.integers(1, 15))
            if i % 3 == 0:
                vals = rng.integers(0, 6, size=n).astype(float)  # heavy ties
            else:
                vals = np.round(rng.normal(loc=rng.uniform(-1, 1), size=n), 3)
            groups.append([float(v) for v in vals])
        flat = np.concatenate(groups)
        if np.all(flat == flat[0]):
            continue
        h, p = stats.kruskal(*groups)
        sets.append({"groups": groups, "h": float(h), "p": float(p)})
    return {"sets": sets}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "metric_oracle.json").write_text(json.dumps(metric_pairs(), indent=1))
    (OUT / "kruskal_oracle.json").write_text(json.dumps(kruskal_sets(), indent=1))


if __name__ == "__main__":
    main()
