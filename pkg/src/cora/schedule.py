"""Few-step DDPM schedule and edit-friendly noise inversion.

Step indices follow the diffusion convention: ``t = T`` is the noisiest
latent and ``t = 0`` the clean one. Denoising step ``i`` (1-based, 1 being
the first/noisiest) works on ``t = T - i + 1``.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng, as_tensor, load_tensor, save_tensor

log = logging.getLogger(__name__)


def train_alpha_bar(num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> np.ndarray:
    """Cumulative products of ``1 - beta`` for the linear-beta training schedule."""
    betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete schedule sampled from a linear-beta training schedule.

    ``timesteps`` lists the virtual training indices in denoising order, so
    ``timesteps[0]`` belongs to ``t = T``. ``custom_alpha_bar`` (same order)
    replaces the linear-beta values with any strictly decreasing sequence.
    """

    timesteps: tuple[int, ...] = (999, 749, 499, 249)
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_floor: float = 1e-5
    c_clip: float = 1.0
    time_shift: float = 0.0
    custom_alpha_bar: tuple[float, ...] | None = None
    alpha_bar: tuple[float, ...] = field(init=False, repr=False)

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        if len(ts) < 1:
            raise ValueError("schedule needs at least one step")
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timesteps must be strictly decreasing: {ts}")
        if ts[0] >= self.num_train_steps or ts[-1] < 0:
            raise ValueError("timesteps out of range")
        object.__setattr__(self, "timesteps", ts)
        if self.custom_alpha_bar is not None:
            custom = tuple(float(a) for a in self.custom_alpha_bar)
            if len(custom) != len(ts):
                raise ValueError("custom_alpha_bar needs one value per timestep")
            object.__setattr__(self, "custom_alpha_bar", custom)
            per_step = custom
        else:
            train_ab = train_alpha_bar(self.num_train_steps, self.beta_start, self.beta_end)
            per_step = tuple(float(train_ab[s]) for s in ts)
        # index 0 is the clean latent, index t is timesteps[T - t]
        ab = [1.0] + [per_step[self.T - t] for t in range(1, self.T + 1)]
        object.__setattr__(self, "alpha_bar", tuple(ab))
        for t in range(1, self.T + 1):
            if not 0.0 < ab[t] < ab[t - 1]:
                raise ValueError("alpha_bar must be strictly decreasing in (0, 1)")
        if self.sigma_floor <= 0:
            raise ValueError("sigma_floor must be positive")

    @classmethod
    def with_steps(cls, steps: int, **kw) -> "NoiseSchedule":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        n = kw.get("num_train_steps", 1000)
        stride = n // steps
        return cls(timesteps=tuple(n - 1 - i * stride for i in range(steps)), **kw)

    @property
    def T(self) -> int:
        return len(self.timesteps)

    def _check(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} outside 1..{self.T}")

    def alpha(self, t: int) -> float:
        self._check(t)
        return self.alpha_bar[t] / self.alpha_bar[t - 1]

    def sigma(self, t: int) -> float:
        """DDPM posterior std; exactly 0 at t = 1 because alpha_bar_0 = 1."""
        self._check(t)
        ab, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        var = (1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)
        return float(np.sqrt(max(var, 0.0)))

    def sigma_eff(self, t: int) -> float:
        return max(self.sigma(t), self.sigma_floor)

    def model_timestep(self, t: int) -> float:
        """Timestep fed to the denoiser, including the inversion time shift."""
        self._check(t)
        raw = self.timesteps[self.T - t] + self.time_shift
        return float(min(max(raw, 0.0), self.num_train_steps - 1))

    def step_of(self, t: int) -> int:
        return self.T - t + 1

    def t_of(self, step: int) -> int:
        return self.T - step + 1

    # -- diffusion arithmetic ------------------------------------------------

    def forward_noise(self, x0, t: int, rng: Rng | None = None, noise=None) -> np.ndarray:
        self._check(t)
        x0 = np.asarray(x0, dtype=np.float64)
        if noise is None:
            if rng is None:
                raise ValueError("need rng or explicit noise")
            noise = rng.normal64(x0.shape)
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != x0.shape:
            raise ValueError("noise shape mismatch")
        ab = self.alpha_bar[t]
        return as_tensor(np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise)

    def predict_mu(self, x_t, t: int, eps) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        eps = np.asarray(eps, dtype=np.float64)
        if x_t.shape != eps.shape:
            raise ValueError(f"shape mismatch {x_t.shape} vs {eps.shape}")
        a, ab = self.alpha(t), self.alpha_bar[t]
        return as_tensor((x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a))

    def extract_correction(self, x_fw_prev, mu, t: int) -> np.ndarray:
        x_fw_prev = np.asarray(x_fw_prev, dtype=np.float64)
        mu = np.asarray(mu, dtype=np.float64)
        if x_fw_prev.shape != mu.shape:
            raise ValueError("shape mismatch")
        return as_tensor((x_fw_prev - mu) / self.sigma_eff(t))

    def clip_bound(self, numel: int) -> float:
        return self.c_clip * float(np.sqrt(numel))

    def correction_term(self, z, t: int, clip_bound: float | None = None):
        """Noise contribution ``sigma_t * z_t`` added in a backward step.

        Where the raw sigma is below ``sigma_floor`` the floor is used, the
        same divisor extraction used, so extract/backward compose exactly. At
        the final step (t = 1) the contribution's L2 norm is clipped to
        ``clip_bound`` (default ``c_clip * sqrt(numel)``).

        Returns ``(contribution, scale)`` where ``scale < 1`` means clipped.
        """
        self._check(t)
        z = np.asarray(z, dtype=np.float64)
        contrib = self.sigma_eff(t) * z
        scale = 1.0
        if t == 1:
            bound = self.clip_bound(z.size) if clip_bound is None else clip_bound
            norm = float(np.sqrt(np.sum(contrib * contrib)))
            if norm > bound:
                scale = bound / norm
                contrib = contrib * scale
        return contrib, scale

    def backward_step(self, x_t, eps, z, t: int, clip_bound: float | None = None) -> np.ndarray:
        x_t = np.asarray(x_t)
        if np.shape(z) != x_t.shape:
            raise ValueError("shape mismatch")
        mu = self.predict_mu(x_t, t, eps)
        contrib, _ = self.correction_term(z, t, clip_bound)
        return as_tensor(mu.astype(np.float64) + contrib)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timesteps"] = list(self.timesteps)
        d["alpha_bar"] = list(self.alpha_bar)
        if self.custom_alpha_bar is not None:
            d["custom_alpha_bar"] = list(self.custom_alpha_bar)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        keys = ("num_train_steps", "beta_start", "beta_end", "sigma_floor", "c_clip", "time_shift")
        custom = d.get("custom_alpha_bar")
        return cls(timesteps=tuple(d["timesteps"]), custom_alpha_bar=None if custom is None else tuple(custom),
                   **{k: d[k] for k in keys if k in d})


@dataclass
class InversionRecord:
    """Everything needed to replay or edit a source latent.

    ``z[t]`` and ``x_fw[t]`` are keyed by step index; ``x_fw[0]`` is the clean
    latent itself and ``x_fw[T]`` equals ``x_T``.
    """

    x0: np.ndarray
    x_fw: dict[int, np.ndarray]
    z: dict[int, np.ndarray]
    prompt_embed: np.ndarray
    schedule: NoiseSchedule
    prompt: str = ""
    noise_seed: int = 0
    denoiser: dict = field(default_factory=dict)
    final_clip_exceeded: bool = False

    @property
    def x_T(self) -> np.ndarray:
        return self.x_fw[self.schedule.T]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.x0.shape

    def final_contribution_norm(self) -> float:
        contrib = self.schedule.sigma_eff(1) * self.z[1].astype(np.float64)
        return float(np.sqrt(np.sum(contrib * contrib)))

    def save(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        T = self.schedule.T
        save_tensor(self.x0, out / "x0.cora")
        save_tensor(self.x_T, out / "x_T.cora")
        for t in range(1, T + 1):
            save_tensor(self.z[t], out / f"z_{t}.cora")
            save_tensor(self.x_fw[t], out / f"x_fw_{t}.cora")
        save_tensor(self.prompt_embed, out / "prompt_embed.cora")
        manifest = {
            "kind": "inversion",
            "schedule": self.schedule.to_dict(),
            "sigma": [self.schedule.sigma(t) for t in range(1, T + 1)],
            "noise_seed": self.noise_seed,
            "prompt": self.prompt,
            "prompt_sha256": hashlib.sha256(self.prompt.encode()).hexdigest(),
            "denoiser": self.denoiser,
            "latent_shape": list(self.x0.shape),
            "final_clip_exceeded": self.final_clip_exceeded,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "InversionRecord":
        path = Path(path)
        m = json.loads((path / "manifest.json").read_text())
        sched = NoiseSchedule.from_dict(m["schedule"])
        T = sched.T
        x0 = load_tensor(path / "x0.cora")
        x_fw = {0: x0}
        z = {}
        for t in range(1, T + 1):
            x_fw[t] = load_tensor(path / f"x_fw_{t}.cora")
            z[t] = load_tensor(path / f"z_{t}.cora")
        return cls(
            x0=x0,
            x_fw=x_fw,
            z=z,
            prompt_embed=load_tensor(path / "prompt_embed.cora"),
            schedule=sched,
            prompt=m.get("prompt", ""),
            noise_seed=m.get("noise_seed", 0),
            denoiser=m.get("denoiser", {}),
            final_clip_exceeded=m.get("final_clip_exceeded", False),
        )


def invert(x0, prompt_embed, schedule: NoiseSchedule, denoiser, rng: Rng, prompt: str = "") -> InversionRecord:
    """Edit-friendly inversion: noise ``x0`` independently to every step, then
    solve for the corrections that make each backward step land on the
    forward-noised latent of the previous step."""
    x0 = as_tensor(x0)
    T = schedule.T
    x_fw = {0: x0}
    for t in range(1, T + 1):
        x_fw[t] = schedule.forward_noise(x0, t, rng)
    z = {}
    for t in range(T, 0, -1):
        eps, _ = denoiser.forward(x_fw[t], schedule.model_timestep(t), prompt_embed)
        mu = schedule.predict_mu(x_fw[t], t, eps)
        z[t] = schedule.extract_correction(x_fw[t - 1], mu, t)
    rec = InversionRecord(
        x0=x0,
        x_fw=x_fw,
        z=z,
        prompt_embed=as_tensor(prompt_embed),
        schedule=schedule,
        prompt=prompt,
        noise_seed=rng.seed,
        denoiser=denoiser.config.to_dict(),
    )
    norm = rec.final_contribution_norm()
    bound = schedule.clip_bound(x0.size)
    if norm > bound:
        rec.final_clip_exceeded = True
        log.info("final-step correction norm %.4g exceeds clip bound %.4g; replay keeps it unclipped", norm, bound)
    return rec


def replay(record: InversionRecord, denoiser, prompt_embed=None) -> np.ndarray:
    """Run the backward process with the recorded corrections and no
    attention control. With the inversion prompt this reproduces ``x0``."""
    sched = record.schedule
    c = record.prompt_embed if prompt_embed is None else prompt_embed
    bound = max(sched.clip_bound(record.x0.size), record.final_contribution_norm())
    x = record.x_T
    for t in range(sched.T, 0, -1):
        eps, _ = denoiser.forward(x, sched.model_timestep(t), c)
        x = sched.backward_step(x, eps, record.z[t], t, clip_bound=bound)
    return x
