"""Synthetic panels with the telemonitoring schema, for tests and dry runs."""

import numpy as np

from .panel_data import COLUMNS, PanelDataset, Provenance, _sorted_by_subject_time


def telemonitoring_like(n_subjects: int = 42, rows_per_subject=(100, 170), seed: int = 0,
                        smooth_amplitude: float = 0.03, noise_sd: float = 0.06) -> PanelDataset:
    """Panel resembling the UCI telemonitoring layout.

    log(total_UPDRS) follows a random intercept + slope model in time with an
    age effect, an HNR main effect, a time x HNR interaction and a mild
    sinusoidal time trend.  Voice features come in correlated families
    (jitter, shimmer) driven by per-subject and per-row latent factors.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    for s in range(1, n_subjects + 1):
        n = int(rng.integers(rows_per_subject[0], rows_per_subject[1] + 1))
        t = np.sort(rng.uniform(-5.0, 215.0, n))
        age = float(rng.integers(36, 86))
        sex = float(rng.random() < 1 / 3)
        b0, b1 = rng.normal(0.0, 0.38), rng.normal(0.0, 0.085)

        subj_voice = rng.normal(size=2)
        jit_latent = subj_voice[0] + 0.6 * rng.normal(size=n)
        shim_latent = 0.5 * subj_voice[0] + subj_voice[1] + 0.6 * rng.normal(size=n)
        jit_base = np.exp(-5.0 + 0.5 * jit_latent)
        jitter = [jit_base * k * np.exp(0.05 * rng.normal(size=n)) for k in (100.0, 0.0007, 0.5, 0.55, 1.5)]
        shim_base = np.exp(-3.4 + 0.4 * shim_latent)
        shimmer = [shim_base * k * np.exp(0.05 * rng.normal(size=n)) for k in (1.0, 9.0, 0.5, 0.6, 0.8, 1.5)]
        nhr = np.exp(-3.7 + 0.6 * jit_latent + 0.3 * rng.normal(size=n))
        hnr = 21.7 - 2.0 * shim_latent + 2.0 * rng.normal(size=n)
        rpde = np.clip(0.54 + 0.05 * shim_latent + 0.08 * rng.normal(size=n), 0.15, 0.99)
        dfa = np.clip(0.65 + 0.07 * rng.normal(size=n), 0.5, 0.87)
        ppe = np.clip(0.22 + 0.04 * jit_latent + 0.06 * rng.normal(size=n), 0.02, 0.75)

        hz = (hnr - 21.7) / 4.0
        tz = t / 100.0
        mu = (3.2 + 0.01 * (age - 65.0) + b0 + (0.05 + b1) * tz - 0.02 * hz - 0.03 * tz * hz
              + smooth_amplitude * np.sin(2 * np.pi * t / 120.0))
        total = np.exp(mu + noise_sd * rng.normal(size=n))
        motor = 0.75 * total * np.exp(0.03 * rng.normal(size=n))
        block = np.column_stack([np.full(n, s), np.full(n, age), np.full(n, sex), t, motor, total,
                                 *jitter, *shimmer, nhr, hnr, rpde, dfa, ppe])
        blocks.append(block)
    values = np.vstack(blocks) if blocks else np.zeros((0, len(COLUMNS)))
    return PanelDataset(_sorted_by_subject_time(values), Provenance(source=f"synthetic(seed={seed})"))
