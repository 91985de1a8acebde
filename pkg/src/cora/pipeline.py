"""Four-step correspondence-aware editing of an inverted latent.

Source and target branches run in lockstep. The source branch replays the
recorded forward-noised latents so its attention states are exact; the
target branch starts from ``x_T`` and is steered by:

* step 1: high-frequency suppression of the start latent and query
  permutation (structural alignment, weight ``beta``);
* every step: source/target key-value mixing (weight ``alpha``), aligned
  through patch correspondence on the steps listed in ``patch_schedule``;
* aligned steps: novelty classification (``alpha = 1`` on new content) and
  realignment of the recorded correction term;
* after each step: optional masked blending with the source trajectory.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np

from . import correspondence as corr
from .denoiser import HookSet, ToyDenoiser, embed_prompt
from .mixing import MixConfig, mix_kv
from .schedule import InversionRecord, NoiseSchedule
from .structure import PermutationPlan, plan_alignment, permute_queries
from .tensor import as_tensor, save_tensor, write_image


class EditError(RuntimeError):
    pass


class ConsistencyError(EditError):
    """Record, schedule and denoiser do not belong together."""


@dataclass
class EditConfig:
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.03
    k_nn: int = 3
    strategy: str = "slerp"
    lam: float = 1.0
    # None: 5x5 patches on the second-to-last step and 3x3 on the last one
    patch_schedule: dict[int, tuple[int, int]] | None = None
    hf_keep_radius: float = 0.25
    mask: np.ndarray | None = None
    tgt_prompt: str | None = None
    novelty_override: bool = True
    aligned_mix: bool = True
    mix_early: bool = True
    structure_align: bool = True
    latent_correction: bool = True
    freeze_novelty: bool = False
    mix_blocks: tuple[int, ...] | None = None
    structure_blocks: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.k_nn < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 < self.hf_keep_radius <= 1.0:
            raise ValueError("hf_keep_radius must lie in (0, 1]")
        if self.patch_schedule is not None:
            self.patch_schedule = {int(k): (int(v[0]), int(v[1])) for k, v in self.patch_schedule.items()}
        if self.mask is not None:
            m = np.asarray(self.mask)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask must be binary")
            self.mask = m.astype(np.float32)
        MixConfig(self.strategy, self.alpha, self.lam)  # validates strategy / lambda

    def steps_with_patches(self, T: int) -> dict[int, tuple[int, int]]:
        if self.patch_schedule is not None:
            return dict(self.patch_schedule)
        return default_patch_schedule(T)

    def mix_config(self) -> MixConfig:
        return MixConfig(self.strategy, self.alpha, self.lam, True, self.novelty_override)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.patch_schedule is not None:
            d["patch_schedule"] = {str(k): list(v) for k, v in self.patch_schedule.items()}
        d["mask"] = None if self.mask is None else "mask.cora"
        for key in ("mix_blocks", "structure_blocks"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict, mask=None) -> "EditConfig":
        d = dict(d)
        if d.get("patch_schedule") is not None:
            d["patch_schedule"] = {int(k): tuple(v) for k, v in d["patch_schedule"].items()}
        for key in ("mix_blocks", "structure_blocks"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        d["mask"] = mask
        return cls(**d)


def default_patch_schedule(T: int) -> dict[int, tuple[int, int]]:
    """Correspondence on the last two steps: 5x5 then 3x3 patches, stride 1."""
    if T == 1:
        return {1: (3, 1)}
    return {T - 1: (5, 1), T: (3, 1)}


def radial_frequency(h: int, w: int) -> np.ndarray:
    """Radial frequency of every FFT bin, scaled so the (Nyquist, Nyquist)
    corner is 1."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy * fy + fx * fx) / np.sqrt(0.5)


def hf_suppress(x, keep_radius: float) -> np.ndarray:
    """Ideal per-channel low-pass: zero FFT bins beyond ``keep_radius``."""
    if not 0.0 < keep_radius <= 1.0:
        raise ValueError("keep_radius must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    keep = radial_frequency(*x.shape[-2:]) <= keep_radius
    coeffs = np.fft.fft2(x, axes=(-2, -1)) * keep
    return as_tensor(np.fft.ifft2(coeffs, axes=(-2, -1)).real)


def masked_blend(x_tgt, x_src_fw, mask) -> np.ndarray:
    x_tgt = np.asarray(x_tgt)
    x_src_fw = np.asarray(x_src_fw)
    mask = np.asarray(mask)
    if x_tgt.shape != x_src_fw.shape or mask.shape != x_tgt.shape[-2:]:
        raise ValueError("blend operands are not congruent")
    return np.where(mask[None] > 0.5, x_tgt, x_src_fw).astype(np.float32)


@dataclass
class StepRecord:
    step: int
    t: int
    timestep: float
    field: corr.CorrespondenceField | None = None
    token_novelty: np.ndarray | None = None
    plans: list[PermutationPlan] = dc_field(default_factory=list)
    costs: list[np.ndarray] = dc_field(default_factory=list)
    norms: dict = dc_field(default_factory=dict)


@dataclass
class Diagnostics:
    steps: list[StepRecord] = dc_field(default_factory=list)

    def step(self, i: int) -> StepRecord:
        return self.steps[i - 1]

    def write(self, out, with_costs: bool = True) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for rec in self.steps:
            d = out / f"step{rec.step}"
            if rec.field is not None or rec.plans:
                d.mkdir(exist_ok=True)
            if rec.field is not None:
                g = rec.field.tgt_geom
                save_tensor(rec.field.coordinate_tensor(), d / "field.cora")
                save_tensor(rec.field.score.reshape(g.n_y, g.n_x), d / "scores.cora")
                save_tensor(rec.field.novelty.reshape(g.n_y, g.n_x).astype(np.float32), d / "novelty.cora")
                save_tensor(rec.token_novelty.astype(np.float32), d / "token_novelty.cora")
                write_image(corr.field_image(rec.field), d / "field.png")
            if rec.plans:
                save_tensor(np.stack([p.pi for p in rec.plans]).astype(np.float32), d / "perm.cora")
                if with_costs:
                    for b, C in enumerate(rec.costs):
                        save_tensor(C, d / f"cost_block{b}.cora")
            lines.append(json.dumps(rec.norms, sort_keys=True))
        (out / "norms.jsonl").write_text("\n".join(lines) + "\n")


def _l2(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def check_consistency(record: InversionRecord, denoiser: ToyDenoiser, schedule: NoiseSchedule | None) -> None:
    if schedule is not None and schedule.to_dict() != record.schedule.to_dict():
        raise ConsistencyError("schedule does not match the inversion record")
    if record.denoiser and record.denoiser != denoiser.config.to_dict():
        raise ConsistencyError("denoiser config does not match the inversion record")
    if record.x0.shape != (denoiser.config.latent_channels, denoiser.config.latent_hw, denoiser.config.latent_hw):
        raise ConsistencyError("record latent shape does not match the denoiser")


def edit(record: InversionRecord, cfg: EditConfig, denoiser: ToyDenoiser,
         schedule: NoiseSchedule | None = None,
         guidance: Callable[[np.ndarray, int], np.ndarray] | None = None):
    """Edit the recorded source toward ``cfg.tgt_prompt``.

    ``guidance(eps, step)`` may post-process the target noise prediction; by
    default it is not applied. Returns ``(x0_latent, Diagnostics)``.
    """
    check_consistency(record, denoiser, schedule)
    sched = record.schedule
    dcfg = denoiser.config
    T = sched.T
    c_src = record.prompt_embed
    c_tgt = c_src if cfg.tgt_prompt is None else embed_prompt(cfg.tgt_prompt, dcfg.d_model)
    mix = cfg.mix_config()
    if cfg.mask is not None and cfg.mask.shape != record.x0.shape[1:]:
        raise ConsistencyError(f"mask shape {cfg.mask.shape} does not match latent {record.x0.shape[1:]}")
    patch_steps = cfg.steps_with_patches(T)
    for step in patch_steps:
        if not 1 <= step <= T:
            raise ConsistencyError(f"patch schedule names step {step} outside 1..{T}")

    bound = max(sched.clip_bound(record.x0.size), record.final_contribution_norm())
    diag = Diagnostics()
    frozen = None
    x = record.x_T
    for step in range(1, T + 1):
        t = sched.t_of(step)
        ts = sched.model_timestep(t)
        rec = StepRecord(step, t, ts)
        try:
            if step == 1 and cfg.hf_keep_radius < 1.0:
                x = hf_suppress(x, cfg.hf_keep_radius)
            _, tap_s = denoiser.forward(record.x_fw[t], ts, c_src)

            aligned = step in patch_steps
            src_index = tok_nov = None
            if aligned:
                k, s = patch_steps[step]
                g_s = corr.extract_patches(tap_s.D, k, s)
                g_t = corr.extract_patches(denoiser.features(x), k, s)
                sims = corr.similarity_matrix(g_s, g_t)
                fld = corr.bidirectional_classify(g_s, g_t, cfg.k_nn, cfg.gamma, sims)
                src_index = corr.token_field(fld, dcfg.ratio, dcfg.token_hw)
                tok_nov = corr.token_novelty(fld, dcfg.ratio, dcfg.token_hw)
                if cfg.freeze_novelty:
                    frozen = tok_nov if frozen is None else frozen
                    tok_nov = frozen
                rec.field, rec.token_novelty = fld, tok_nov

            do_mix = aligned or cfg.mix_early
            do_perm = step == 1 and cfg.structure_align

            def q_fn(b, q):
                if cfg.structure_blocks is not None and b not in cfg.structure_blocks:
                    return q
                plan, C = plan_alignment(tap_s.q[b], q, cfg.beta)
                rec.plans.append(plan)
                rec.costs.append(C)
                return permute_queries(q, plan)

            def kv_fn(b, q, k_t, v_t):
                if cfg.mix_blocks is not None and b not in cfg.mix_blocks:
                    return k_t, v_t
                K, V, _ = mix_kv(tap_s.k[b], tap_s.v[b], k_t, v_t, mix, src_index, tok_nov,
                                 aligned=aligned and cfg.aligned_mix)
                return K, V

            hooks = HookSet(record=False, q_fn=q_fn if do_perm else None, kv_fn=kv_fn if do_mix else None)
            eps, _ = denoiser.forward(x, ts, c_tgt, hooks)
            if guidance is not None:
                eps = as_tensor(guidance(eps, step))

            z = record.z[t]
            z_used = corr.reassemble_aligned(z, rec.field) if aligned and cfg.latent_correction else z
            _, clip_scale = sched.correction_term(z_used, t, bound)
            x_new = sched.backward_step(x, eps, z_used, t, clip_bound=bound)
            if cfg.mask is not None:
                x_new = masked_blend(x_new, record.x_fw[t - 1], cfg.mask)
        except ConsistencyError:
            raise
        except (ValueError, IndexError) as exc:
            raise EditError(f"step {step}: {exc}") from exc

        rec.norms = {
            "step": step,
            "t": t,
            "timestep": ts,
            "x_in": _l2(x),
            "eps": _l2(eps),
            "z": _l2(z),
            "z_used": _l2(z_used),
            "x_out": _l2(x_new),
            "clip_scale": clip_scale,
            "aligned": aligned,
            "permuted": bool(rec.plans),
            "n_novel_patches": int(rec.field.novelty.sum()) if rec.field is not None else 0,
            "n_novel_tokens": int(tok_nov.sum()) if tok_nov is not None else 0,
        }
        diag.steps.append(rec)
        x = x_new
    return x, diag


def identity_config(**kw) -> EditConfig:
    """Configuration under which editing reduces to reconstruction."""
    base = dict(alpha=0.0, beta=0.0, strategy="slerp", hf_keep_radius=1.0, mask=None, tgt_prompt=None)
    base.update(kw)
    return EditConfig(**base)
