"""Composition of all loss terms into the joint training objective.

The generator-side total is

    lam * (seg_real_A + seg_real_V)
    + (1 - lam) * (seg_gen_A + seg_gen_V)
    + adv_AtoV + adv_VtoA
    + lam_cyc * cycle

where seg_gen_A trains the arterial segmenter on venous images translated
into the arterial style, paired with their source (venous) labels, and
vice versa. Terms whose weight is exactly zero are excluded from the
autograd graph entirely (their values are still reported), so lam=1
reduces the parameter gradients bitwise to the real-data-only form.

Discriminators are trained on a separate total (their least-squares terms
with detached fakes), following the usual alternating scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .bundle import ModelBundle
from .errors import PhaseMismatchError
from .segmenter import SegModel, probs_loss
from .translator import Discriminator, Generator, adversarial_distance


@dataclass(frozen=True)
class LossBreakdown:
    seg_real_a: float
    seg_real_v: float
    adv_a2v: float
    adv_v2a: float
    seg_gen_a: float
    seg_gen_v: float
    cycle: float
    disc_a: float
    disc_v: float
    lam: float
    lam_cyc: float

    @property
    def total(self) -> float:
        return (self.lam * (self.seg_real_a + self.seg_real_v)
                + (1.0 - self.lam) * (self.seg_gen_a + self.seg_gen_v)
                + self.adv_a2v + self.adv_v2a
                + self.lam_cyc * self.cycle)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "seg_real_a", "seg_real_v", "adv_a2v", "adv_v2a", "seg_gen_a",
            "seg_gen_v", "cycle", "disc_a", "disc_v", "lam", "lam_cyc")}
        d["total"] = self.total
        return d


@dataclass
class PcnLossResult:
    gen_total: torch.Tensor  # drives segmenters and generators
    disc_total: torch.Tensor  # drives discriminators
    breakdown: LossBreakdown


def p2p_loss(g: Generator, f_target: SegModel, d_model: Discriminator,
             x_src: torch.Tensor, y_src: torch.Tensor, reals: torch.Tensor,
             loss_kind: str = "l1"):
    """One direction of the cross-phase objective.

    Translates x_src, scores it against real target-phase images, and
    segments it against the source labels (the translation preserves
    geometry, so the source labels remain the supervision).

    Returns (gen_term, disc_term, seg_gen).
    """
    if f_target.phase is not None and f_target.phase is not g.target:
        raise PhaseMismatchError(
            f"segmenter is for {f_target.phase.value} but generator targets {g.target.value}"
        )
    if d_model.phase is not g.target:
        raise PhaseMismatchError(
            f"discriminator judges {d_model.phase.value} but generator targets {g.target.value}"
        )
    fake = g.fake(x_src)
    gen_term, disc_term = adversarial_distance(d_model, fake, reals)
    seg_gen = probs_loss(f_target.probs(fake), y_src, f_target.arch.num_classes, loss_kind)
    return gen_term, disc_term, seg_gen


def compute_pcn_loss(bundle: ModelBundle, batch_a: tuple[torch.Tensor, torch.Tensor],
                     batch_v: tuple[torch.Tensor, torch.Tensor], lam: float,
                     lam_cyc: float = 10.0, loss_kind: str = "l1",
                     translator_frozen: bool = False) -> PcnLossResult:
    """Evaluate the full objective on one arterial and one venous batch.

    batch_a / batch_v: (normalized images (B,1,H,W), labels (B,H,W)). The
    two batches are independent draws; case pairing is never used.

    With translator_frozen the fakes are computed without a graph, so
    segmenters still learn from translated data but no gradient can reach
    the generators, and the returned disc_total is constant.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    x_a, y_a = batch_a
    x_v, y_v = batch_v
    C = bundle.num_classes

    use_real = lam > 0.0
    use_gen = lam < 1.0

    def seg_real(f, x, y):
        if use_real:
            return probs_loss(f.probs(x), y, C, loss_kind)
        with torch.no_grad():
            return probs_loss(f.probs(x), y, C, loss_kind)

    seg_real_a = seg_real(bundle.f_a, x_a, y_a)
    seg_real_v = seg_real(bundle.f_v, x_v, y_v)

    if translator_frozen:
        with torch.no_grad():
            fake_v = bundle.g_av.fake(x_a)
            fake_a = bundle.g_va.fake(x_v)
            gen_a2v, disc_v = adversarial_distance(bundle.d_v, fake_v, x_v)
            gen_v2a, disc_a = adversarial_distance(bundle.d_a, fake_a, x_a)
            cyc = ((bundle.g_va.fake(fake_v) - x_a).abs().mean()
                   + (bundle.g_av.fake(fake_a) - x_v).abs().mean())
    else:
        fake_v = bundle.g_av.fake(x_a)
        fake_a = bundle.g_va.fake(x_v)
        gen_a2v, disc_v = adversarial_distance(bundle.d_v, fake_v, x_v)
        gen_v2a, disc_a = adversarial_distance(bundle.d_a, fake_a, x_a)
        if lam_cyc > 0.0:
            cyc = ((bundle.g_va.fake(fake_v) - x_a).abs().mean()
                   + (bundle.g_av.fake(fake_a) - x_v).abs().mean())
        else:
            with torch.no_grad():
                cyc = ((bundle.g_va.fake(fake_v) - x_a).abs().mean()
                       + (bundle.g_av.fake(fake_a) - x_v).abs().mean())

    def seg_gen(f, fake, y):
        if use_gen:
            return probs_loss(f.probs(fake), y, C, loss_kind)
        with torch.no_grad():
            return probs_loss(f.probs(fake), y, C, loss_kind)

    # Translated images keep their source labels: the arterial-styled
    # output of g_va feeds the arterial segmenter with the venous labels.
    seg_gen_v = seg_gen(bundle.f_v, fake_v, y_a)
    seg_gen_a = seg_gen(bundle.f_a, fake_a, y_v)

    total = torch.zeros((), dtype=seg_real_a.dtype)
    if use_real:
        total = total + lam * (seg_real_a + seg_real_v)
    if use_gen:
        total = total + (1.0 - lam) * (seg_gen_a + seg_gen_v)
    if not translator_frozen:
        total = total + (gen_a2v + gen_v2a)
        if lam_cyc > 0.0:
            total = total + lam_cyc * cyc
    disc_total = disc_a + disc_v

    breakdown = LossBreakdown(
        seg_real_a=seg_real_a.item(), seg_real_v=seg_real_v.item(),
        adv_a2v=gen_a2v.item(), adv_v2a=gen_v2a.item(),
        seg_gen_a=seg_gen_a.item(), seg_gen_v=seg_gen_v.item(),
        cycle=cyc.item(), disc_a=disc_a.item(), disc_v=disc_v.item(),
        lam=lam, lam_cyc=lam_cyc,
    )
    return PcnLossResult(gen_total=total, disc_total=disc_total, breakdown=breakdown)


def pcn_loss_with_grads(bundle: ModelBundle, batch_a, batch_v, lam: float,
                        lam_cyc: float = 10.0, loss_kind: str = "l1"):
    """Breakdown plus flat gradients per model.

    Segmenter and generator gradients come from the generator-side total,
    discriminator gradients from the discriminator total, matching how
    training applies them.
    """
    out = compute_pcn_loss(bundle, batch_a, batch_v, lam, lam_cyc, loss_kind)
    grads = {}
    gen_params = {name: list(m.net.parameters())
                  for name, m in bundle.named_models().items()}
    for name in ("f_a", "f_v", "g_av", "g_va"):
        g = torch.autograd.grad(out.gen_total, gen_params[name], retain_graph=True,
                                allow_unused=True, materialize_grads=True)
        grads[name] = torch.cat([t.reshape(-1) for t in g])
    for name in ("d_a", "d_v"):
        g = torch.autograd.grad(out.disc_total, gen_params[name], retain_graph=True,
                                allow_unused=True, materialize_grads=True)
        grads[name] = torch.cat([t.reshape(-1) for t in g])
    return out.breakdown, grads
