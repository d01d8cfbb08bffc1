"""Training-time forward corruption.

Each non-prompt token survives independently with probability kappa(t_text).
Deleted tokens are collected into the bag of the gap between their surviving
neighbours. Images follow the interleaved clock: an image whose lagged time is
negative has not been inserted yet and contributes ``<|image|>`` to its bag;
otherwise it survives, noised to its clipped time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from eflab.errors import ConfigError, DomainError
from eflab.schedule import ExtendedTime, Schedule, clip_time, sample_insertion_time
from eflab.sequence import ImageBlock, MixedSequence, is_image

MODES = ("interleaved", "independent", "text_only")


@dataclass
class CorruptionRecord:
    x_t: MixedSequence
    bags: list[list[int]]
    tau_text: ExtendedTime
    image_times: list[ExtendedTime]
    alignment: dict[int, int]
    source_len: int
    # x_t index -> (y0, y1) for every image noised by this corruption
    flow_pairs: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    n_deleted_images: int = 0

    @property
    def counts(self) -> list[int]:
        return [len(b) for b in self.bags]

    @property
    def t_text(self) -> float:
        return self.tau_text.clipped

    def reconstruct(self, image_token_id: int) -> tuple[int, ...]:
        """Symbols of the source sequence, by interleaving survivors with bags.

        Bags are stored in source order, so this is an exact inverse.
        """
        syms = self.x_t.symbols(image_token_id)
        out: list[int] = []
        for gap, bag in enumerate(self.bags):
            out.extend(bag)
            if gap < len(syms):
                out.append(syms[gap])
        return tuple(out)

    def to_json(self) -> dict:
        from eflab.sequence import to_record

        return {
            "x_t": to_record(self.x_t),
            "bags": self.bags,
            "counts": self.counts,
            "tau_text": self.tau_text.tau,
            "t_text": self.t_text,
            "image_times": [t.tau for t in self.image_times],
            "alignment": {str(k): v for k, v in sorted(self.alignment.items())},
        }


def deletion_time_of_image(s: Schedule, tau_text: float, rng: np.random.Generator) -> float | None:
    """Clipped image time, or ``None`` when the image is not yet inserted."""
    if not 0.0 <= tau_text <= 2.0:
        raise DomainError(f"tau_text must lie in [0, 2], got {tau_text}")
    tau_img = tau_text - sample_insertion_time(s, rng)
    if tau_img < 0:
        return None
    return min(1.0, tau_img)


def _noise_image(img: ImageBlock, tau: float, rng: np.random.Generator):
    t = clip_time(tau)
    y1 = img.values
    y0 = rng.standard_normal(y1.shape[0])
    return ImageBlock(t * y1 + (1.0 - t) * y0, ExtendedTime(tau)), y0, y1


def corrupt(
    x1: MixedSequence,
    s: Schedule,
    mode: str,
    rng: np.random.Generator,
    tau_text: float | None = None,
    image_token_id: int | None = None,
) -> CorruptionRecord:
    """Draw a noisy training state from a clean sequence.

    ``tau_text`` overrides the sampled clock. In ``text_only`` mode any images
    are treated like tokens and survivors stay clean; in ``independent`` mode
    images are never deleted and each gets its own uniform time.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}")
    if image_token_id is None and any(is_image(el) for el in x1.target):
        raise ValueError("corrupting images needs image_token_id")
    if tau_text is None:
        tau_text = float(rng.uniform(0.0, 2.0)) if mode == "interleaved" else float(rng.random())
    upper = 2.0 if mode == "interleaved" else 1.0
    if not 0.0 <= tau_text <= upper:
        raise DomainError(f"tau_text {tau_text} outside [0, {upper}] for mode {mode}")
    tau = ExtendedTime(tau_text)
    keep_p = s.kappa(tau.clipped)

    p = x1.prompt_len
    kept: list = list(x1.elements[:p])
    alignment = {i: i for i in range(p)}
    bags: list[list[int]] = [[] for _ in range(p + 1)]
    flow_pairs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    n_deleted_images = 0

    for src in range(p, len(x1)):
        el = x1.elements[src]
        if is_image(el) and mode != "text_only":
            if mode == "interleaved":
                tau_img = tau_text - float(sample_insertion_time(s, rng))
            else:
                tau_img = float(rng.random())
            if tau_img < 0:
                bags[-1].append(image_token_id)
                n_deleted_images += 1
                continue
            noised, y0, y1 = _noise_image(el, tau_img, rng)
            if noised.t < 1.0:
                # a finished image has no velocity to learn; its y0 is unobservable
                flow_pairs[len(kept)] = (y0, y1)
            alignment[len(kept)] = src
            kept.append(noised)
            bags.append([])
        elif rng.random() < keep_p:
            alignment[len(kept)] = src
            kept.append(el)
            bags.append([])
        else:
            bags[-1].append(image_token_id if is_image(el) else int(el))
            n_deleted_images += is_image(el)

    x_t = x1.replace(kept)
    image_times = [x_t[i].time for i in x_t.image_indices()]
    return CorruptionRecord(
        x_t=x_t,
        bags=bags,
        tau_text=tau,
        image_times=image_times,
        alignment=alignment,
        source_len=len(x1),
        flow_pairs=flow_pairs,
        n_deleted_images=n_deleted_images,
    )
