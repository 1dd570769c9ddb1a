"""Listing-level inputs to an ObservationTable."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from dmla.data_model import ObservationTable
from dmla.errors import DataValidationError, DegenerateNormError, TransformError

DEFAULT_MAX_IMAGES = 12


@dataclass(frozen=True)
class RawListing:
    id: str
    price: float
    feedback_score: int
    image_embeddings: Sequence[Sequence[float]]
    text_embedding: Sequence[float] = ()
    price_guess: Optional[float] = None
    score_guess: Optional[int] = None
    # Only needed when querying the prediction service.
    text: Optional[str] = None
    image_links: Sequence[str] = field(default_factory=tuple)
    n_bids: Optional[int] = None

    @classmethod
    def from_dict(cls, data: dict) -> "RawListing":
        known = set(cls.__dataclass_fields__)
        missing = {"id", "price", "feedback_score", "image_embeddings"} - set(data)
        if missing:
            raise DataValidationError(f"listing is missing fields {sorted(missing)}")
        return cls(**{k: v for k, v in data.items() if k in known})

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "price": self.price,
            "feedback_score": self.feedback_score,
            "image_embeddings": [list(v) for v in self.image_embeddings],
            "text_embedding": list(self.text_embedding),
        }
        for key in ("price_guess", "score_guess", "text", "n_bids"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        if self.image_links:
            out["image_links"] = list(self.image_links)
        return out


@dataclass(frozen=True)
class TransformOptions:
    max_images: int = DEFAULT_MAX_IMAGES

    def __post_init__(self):
        if self.max_images < 1:
            raise ValueError("max_images must be >= 1")


def average_image_embeddings(vectors, max_images: int = DEFAULT_MAX_IMAGES) -> np.ndarray:
    """Unit-normalize each of the first ``max_images`` vectors and average them."""
    if max_images < 1:
        raise ValueError("max_images must be >= 1")
    if len(vectors) == 0:
        raise DataValidationError("no image embeddings to average")
    arr = np.asarray(vectors[:max_images], dtype=float)
    if arr.ndim != 2:
        raise DataValidationError("image embeddings must share one dimension")
    if not np.all(np.isfinite(arr)):
        raise DataValidationError("image embeddings contain non-finite values")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0):
        raise DegenerateNormError(f"image embedding {int(np.flatnonzero(norms == 0)[0])} is all zeros")
    return (arr / norms[:, None]).mean(axis=0)


def concat_features(img_avg, txt) -> np.ndarray:
    return np.concatenate([np.asarray(img_avg, dtype=float).ravel(), np.asarray(txt, dtype=float).ravel()])


def empirical_quantile(values, target):
    """Mid-rank of ``target`` among ``values`` divided by ``len(values)``.

    Ties share the average of their ranks. A target absent from ``values``
    gets rank ``#{values < target} + 1/2``, capped at n, so the result stays
    in (0, 1] and is monotone in ``target``. ``target`` may be an array.
    """
    vals = np.sort(np.asarray(values, dtype=float).ravel())
    n = vals.size
    if n == 0:
        raise ValueError("values must be non-empty")
    tgt = np.asarray(target, dtype=float)
    less = np.searchsorted(vals, tgt, side="left")
    equal = np.searchsorted(vals, tgt, side="right") - less
    rank = np.where(equal > 0, less + (equal + 1) / 2.0, np.minimum(less + 0.5, n))
    q = rank / n
    return float(q) if q.ndim == 0 else q


def build_table(listings: Sequence[RawListing], opts: TransformOptions = TransformOptions()) -> ObservationTable:
    """Log price outcome, feedback-score quantile treatment, concatenated embeddings.

    Guesses go through the same transforms as the variables they predict: the
    price guess is logged and the score guess is ranked against the observed
    feedback scores.
    """
    if not listings:
        raise DataValidationError("no listings")
    rows = []
    p_img = p_txt = None
    for i, lst in enumerate(listings):
        if not lst.image_embeddings:
            raise TransformError(f"row {i} (id {lst.id}): listing has no images", row=i)
        if not lst.price > 0:
            raise TransformError(f"row {i} (id {lst.id}): price must be > 0, got {lst.price}", row=i)
        if lst.price_guess is not None and not lst.price_guess > 0:
            raise TransformError(f"row {i} (id {lst.id}): price_guess must be > 0, got {lst.price_guess}", row=i)
        if lst.feedback_score < 0 or (lst.score_guess is not None and lst.score_guess < 0):
            raise TransformError(f"row {i} (id {lst.id}): negative feedback score", row=i)
        try:
            img = average_image_embeddings(lst.image_embeddings, opts.max_images)
        except DataValidationError as exc:
            raise TransformError(f"row {i} (id {lst.id}): {exc}", row=i) from exc
        txt = np.asarray(lst.text_embedding, dtype=float).ravel()
        if not np.all(np.isfinite(txt)):
            raise TransformError(f"row {i} (id {lst.id}): text embedding has non-finite values", row=i)
        if p_img is None:
            p_img, p_txt = img.size, txt.size
        elif (img.size, txt.size) != (p_img, p_txt):
            raise TransformError(
                f"row {i} (id {lst.id}): embedding dims ({img.size}, {txt.size}) differ from ({p_img}, {p_txt})",
                row=i,
            )
        rows.append(concat_features(img, txt))

    scores = np.array([lst.feedback_score for lst in listings], dtype=float)
    have_pg = [lst.price_guess is not None for lst in listings]
    have_sg = [lst.score_guess is not None for lst in listings]
    y_guess = d_guess = None
    if any(have_pg) or any(have_sg):
        if not (all(have_pg) and all(have_sg)):
            missing = next(i for i, (a, b) in enumerate(zip(have_pg, have_sg)) if not (a and b))
            raise TransformError(f"row {missing}: guesses must be present for every listing or none", row=missing)
        y_guess = np.log([lst.price_guess for lst in listings])
        d_guess = empirical_quantile(scores, np.array([lst.score_guess for lst in listings], dtype=float))

    table = ObservationTable(
        y=np.log([lst.price for lst in listings]),
        d=empirical_quantile(scores, scores),
        x=np.vstack(rows),
        ids=[lst.id for lst in listings],
        y_guess=y_guess,
        d_guess=d_guess,
    )
    return table.validate()


def feature_dims(listings: Sequence[RawListing]) -> tuple[int, int]:
    first = listings[0]
    return len(first.image_embeddings[0]), len(first.text_embedding)
