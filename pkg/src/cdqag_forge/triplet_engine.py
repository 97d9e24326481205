"""Generate {question, answer, mask} triplets for the eight change question
types, render questions from a small template bank, and split datasets
image-wise.

Answer rules are pure functions of the pair's transition statistics; an
answer of "no"/"none"/"0" always carries an empty grounding mask.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .change_analysis import (
    changed_mask,
    summarize,
    transition_mask,
    transition_matrix,
)
from .errors import (
    BadRatios,
    ClassIdOutOfRange,
    EmptyDataset,
    TemplateOutOfRange,
)
from .raster_io import BinaryMask, ClassTaxonomy, MaskPair
from .rng import SplitMix64, derive_seed


class QuestionType(str, Enum):
    CN = "CN"  # change or not
    CtW = "CtW"  # change to what
    CfW = "CfW"  # change from what
    IN = "IN"  # increase or not
    DN = "DN"  # decrease or not
    LC = "LC"  # largest change
    SC = "SC"  # smallest change
    CR = "CR"  # change ratio


#: Types that take a subject class; LC/SC are scene-level.
SUBJECT_TYPES = (
    QuestionType.CN,
    QuestionType.CtW,
    QuestionType.CfW,
    QuestionType.IN,
    QuestionType.DN,
    QuestionType.CR,
)

TYPE_ORDER = (
    QuestionType.CN,
    QuestionType.CtW,
    QuestionType.CfW,
    QuestionType.IN,
    QuestionType.DN,
    QuestionType.LC,
    QuestionType.SC,
    QuestionType.CR,
)

RATIO_BUCKETS = ("0",) + tuple(
    f"{10 * b}_to_{10 * (b + 1)}" for b in range(10)
)


def answer_vocabulary(taxonomy: ClassTaxonomy) -> tuple[str, ...]:
    """Closed answer vocabulary: yes/no/none + class names + ratio buckets."""
    return ("yes", "no", "none") + tuple(taxonomy.names) + RATIO_BUCKETS


def ratio_bucket(changed: int, total: int) -> str:
    """Decile bucket of 100*changed/total; exact zero is its own token.

    Buckets are (10(b-1), 10b], upper-inclusive, decided in exact integer
    arithmetic.
    """
    if changed == 0:
        return "0"
    b = -(-10 * changed // total)  # ceil(10*changed/total)
    b = min(b, 10)
    return f"{10 * (b - 1)}_to_{10 * b}"


# Each template: question text with {class}/{time} slots plus the temporal
# word pair bound to it ([T1 word, T2 word]). Five per type; index 0 of CR
# and SC reproduce the two published example questions.
DEFAULT_TEMPLATE_BANK: dict[str, list[dict]] = {
    "CN": [
        {"text": "Has the {class} area changed in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Did any change happen to the {class} region in the {time} scene?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "Is there any change in {class} in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "Does the {class} area look different in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Was the {class} area altered in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "CtW": [
        {"text": "What has the {class} area changed to in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which category did {class} mainly turn into by the {time} image?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "What does the {class} region become in the {time} scene?",
         "time_words": ["before", "after"]},
        {"text": "What land cover replaced {class} in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Into what category has {class} changed in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "CfW": [
        {"text": "What has the {class} area changed from in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which category did the new {class} come from in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "What was the {class} region previously in the {time} scene?",
         "time_words": ["before", "after"]},
        {"text": "What land cover turned into {class} in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "From what category did {class} emerge in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "IN": [
        {"text": "Has the {class} area increased in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Did the amount of {class} grow by the {time} image?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "Is there more {class} in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "Has the extent of {class} gone up in the {time} scene?",
         "time_words": ["first", "second"]},
        {"text": "Did {class} expand in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "DN": [
        {"text": "Has the {class} area decreased in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Did the amount of {class} shrink by the {time} image?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "Is there less {class} in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "Has the extent of {class} gone down in the {time} scene?",
         "time_words": ["first", "second"]},
        {"text": "Did {class} contract in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "LC": [
        {"text": "What is the largest change in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which category shows the largest change in the {time} scene?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "Which land cover changed the most in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "What category has the biggest change in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which class changed most heavily in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "SC": [
        {"text": "What is the smallest change in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which category shows the smallest change in the {time} scene?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "Which land cover changed the least in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "What category has the slightest change in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "Which class changed least heavily in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
    "CR": [
        {"text": "How much {class} area has changed in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
        {"text": "What is the change ratio of {class} in the {time} image?",
         "time_words": ["first", "second"]},
        {"text": "What fraction of {class} has changed in the {time} image?",
         "time_words": ["before", "after"]},
        {"text": "How large is the change in {class} in the {time} scene?",
         "time_words": ["first", "second"]},
        {"text": "What portion of the {class} area changed in the {time} image?",
         "time_words": ["pre-change", "post-change"]},
    ],
}

N_TEMPLATES = 5


def load_template_bank(path: str | Path) -> dict[str, list[dict]]:
    with open(path) as f:
        bank = json.load(f)
    for qtype in QuestionType:
        if len(bank.get(qtype.value, [])) != N_TEMPLATES:
            raise TemplateOutOfRange(
                f"template bank needs {N_TEMPLATES} entries for {qtype.value}"
            )
    return bank


@dataclass(frozen=True)
class QuestionSpec:
    qtype: QuestionType
    time_index: int  # 1 or 2
    subject: Optional[int]  # class id; None for LC/SC
    template_id: int

    def __post_init__(self):
        if self.time_index not in (1, 2):
            raise ValueError("time_index must be 1 or 2")
        has_subject = self.subject is not None
        if has_subject != (self.qtype in SUBJECT_TYPES):
            raise ValueError("subject present iff the type is class-conditioned")
        if not 0 <= self.template_id < N_TEMPLATES:
            raise TemplateOutOfRange(f"template_id {self.template_id}")


@dataclass(frozen=True)
class Triplet:
    triplet_id: str
    pair_id: str
    question: str
    spec: QuestionSpec
    answer: str
    mask: BinaryMask

    def __post_init__(self):
        n_words = len(self.question.split())
        if not 4 <= n_words <= 15:
            raise ValueError(f"question must be 4-15 words, got {n_words}")

    def to_json_obj(self) -> dict:
        return {
            "id": self.triplet_id,
            "pair_id": self.pair_id,
            "qtype": self.spec.qtype.value,
            "time_index": self.spec.time_index,
            "subject": self.spec.subject,
            "question": self.question,
            "answer": self.answer,
            "mask": self.mask.to_json_obj(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Triplet":
        spec = QuestionSpec(
            qtype=QuestionType(obj["qtype"]),
            time_index=obj["time_index"],
            subject=obj["subject"],
            template_id=0,
        )
        return cls(
            triplet_id=obj["id"],
            pair_id=obj["pair_id"],
            question=obj["question"],
            spec=spec,
            answer=obj["answer"],
            mask=BinaryMask.from_json_obj(obj["mask"]),
        )


# --- the eight answer rules -------------------------------------------------

def answer_cn(pair: MaskPair, k: int, K: int) -> tuple[str, BinaryMask]:
    """Change or not: yes iff any pixel enters or leaves class k."""
    mask = changed_mask(pair, k, "either", K)
    if mask.popcount() > 0:
        return "yes", mask
    return "no", BinaryMask.empty(pair.width, pair.height)


def answer_ctw(
    pair: MaskPair, k: int, taxonomy: ClassTaxonomy
) -> tuple[str, BinaryMask]:
    """Change to what: dominant destination class of pixels leaving k."""
    K = taxonomy.K
    tm = transition_matrix(pair, K)
    row = tm.counts[k].copy()
    row[k] = 0
    if row.sum() == 0:
        return "none", BinaryMask.empty(pair.width, pair.height)
    j = int(np.argmax(row))  # argmax ties break to smallest class id
    return taxonomy.names[j], transition_mask(pair, k, j, K)


def answer_cfw(
    pair: MaskPair, k: int, taxonomy: ClassTaxonomy
) -> tuple[str, BinaryMask]:
    """Change from what: dominant origin class of pixels entering k."""
    K = taxonomy.K
    tm = transition_matrix(pair, K)
    col = tm.counts[:, k].copy()
    col[k] = 0
    if col.sum() == 0:
        return "none", BinaryMask.empty(pair.width, pair.height)
    i = int(np.argmax(col))
    return taxonomy.names[i], transition_mask(pair, i, k, K)


def answer_in(pair: MaskPair, k: int, K: int) -> tuple[str, BinaryMask]:
    """Increase or not: net area growth; grounding is the gained pixels."""
    if not 0 <= k < K:
        raise ClassIdOutOfRange(f"class id {k}")
    s = summarize(transition_matrix(pair, K))
    if s.area_t2[k] > s.area_t1[k]:
        return "yes", changed_mask(pair, k, "target", K)
    return "no", BinaryMask.empty(pair.width, pair.height)


def answer_dn(pair: MaskPair, k: int, K: int) -> tuple[str, BinaryMask]:
    """Decrease or not: net area loss; grounding is the lost pixels."""
    if not 0 <= k < K:
        raise ClassIdOutOfRange(f"class id {k}")
    s = summarize(transition_matrix(pair, K))
    if s.area_t2[k] < s.area_t1[k]:
        return "yes", changed_mask(pair, k, "source", K)
    return "no", BinaryMask.empty(pair.width, pair.height)


def _change_scores(pair: MaskPair, K: int, measure: str) -> np.ndarray:
    s = summarize(transition_matrix(pair, K))
    if measure == "net":
        scores = np.abs(s.net)
        # a class is in play only if it has gross change at all
        scores = np.where(s.changed > 0, scores, -1)
        return scores
    return np.where(s.changed > 0, s.changed, -1)


def answer_lc(
    pair: MaskPair, taxonomy: ClassTaxonomy, measure: str = "gross"
) -> tuple[str, BinaryMask]:
    """Largest change among classes with nonzero change."""
    K = taxonomy.K
    scores = _change_scores(pair, K, measure)
    if scores.max() < 0:
        return "none", BinaryMask.empty(pair.width, pair.height)
    k = int(np.argmax(scores))
    return taxonomy.names[k], changed_mask(pair, k, "either", K)


def answer_sc(
    pair: MaskPair, taxonomy: ClassTaxonomy, measure: str = "gross"
) -> tuple[str, BinaryMask]:
    """Smallest nonzero change; unchanged classes never qualify."""
    K = taxonomy.K
    scores = _change_scores(pair, K, measure)
    if scores.max() < 0:
        return "none", BinaryMask.empty(pair.width, pair.height)
    candidates = np.where(scores < 0, np.iinfo(np.int64).max, scores)
    k = int(np.argmin(candidates))
    return taxonomy.names[k], changed_mask(pair, k, "either", K)


def answer_cr(pair: MaskPair, k: int, K: int) -> tuple[str, BinaryMask]:
    """Change ratio of class k as a decile bucket of changed-pixel share."""
    mask = changed_mask(pair, k, "either", K)
    changed = mask.popcount()
    token = ratio_bucket(changed, pair.width * pair.height)
    if changed == 0:
        return token, BinaryMask.empty(pair.width, pair.height)
    return token, mask


# --- rendering and generation ----------------------------------------------

def render_question(
    spec: QuestionSpec,
    taxonomy: ClassTaxonomy,
    bank: dict[str, list[dict]] | None = None,
) -> str:
    """Deterministic template instantiation; class names render with spaces."""
    bank = bank or DEFAULT_TEMPLATE_BANK
    templates = bank[spec.qtype.value]
    if not 0 <= spec.template_id < len(templates):
        raise TemplateOutOfRange(f"template_id {spec.template_id}")
    tpl = templates[spec.template_id]
    subs = {"time": tpl["time_words"][spec.time_index - 1]}
    if spec.subject is not None:
        subs["class"] = taxonomy.names[spec.subject].replace("_", " ")
    return tpl["text"].format(**subs)


@dataclass(frozen=True)
class GenConfig:
    """Controls subject enumeration and rule variants during generation."""

    include_absent: bool = False
    change_measure: str = "gross"  # or "net", for LC/SC ranking
    templates: Optional[dict] = None


def _answer_for(
    pair: MaskPair,
    taxonomy: ClassTaxonomy,
    qtype: QuestionType,
    subject: Optional[int],
    config: GenConfig,
) -> tuple[str, BinaryMask]:
    K = taxonomy.K
    if qtype is QuestionType.CN:
        return answer_cn(pair, subject, K)
    if qtype is QuestionType.CtW:
        return answer_ctw(pair, subject, taxonomy)
    if qtype is QuestionType.CfW:
        return answer_cfw(pair, subject, taxonomy)
    if qtype is QuestionType.IN:
        return answer_in(pair, subject, K)
    if qtype is QuestionType.DN:
        return answer_dn(pair, subject, K)
    if qtype is QuestionType.LC:
        return answer_lc(pair, taxonomy, config.change_measure)
    if qtype is QuestionType.SC:
        return answer_sc(pair, taxonomy, config.change_measure)
    if qtype is QuestionType.CR:
        return answer_cr(pair, subject, K)
    raise ValueError(qtype)


def generate_triplets(
    pair: MaskPair,
    taxonomy: ClassTaxonomy,
    config: GenConfig = GenConfig(),
    seed: int = 0,
) -> list[Triplet]:
    """All applicable (qtype, subject, time_index) triplets for one pair.

    Output order is (qtype, subject, time_index); template choice is a
    seeded draw keyed by (seed, pair_id, qtype, subject, time_index), so
    identical inputs give byte-identical output regardless of worker count.
    """
    K = taxonomy.K
    if config.include_absent:
        subjects = list(range(K))
    else:
        present = set(np.unique(pair.t1.labels)) | set(
            np.unique(pair.t2.labels)
        )
        subjects = sorted(int(c) for c in present)
    out: list[Triplet] = []
    for qtype in TYPE_ORDER:
        subject_list: list[Optional[int]] = (
            list(subjects) if qtype in SUBJECT_TYPES else [None]
        )
        for subject in subject_list:
            answer, mask = _answer_for(pair, taxonomy, qtype, subject, config)
            for time_index in (1, 2):
                key = derive_seed(
                    seed,
                    pair.pair_id,
                    qtype.value,
                    -1 if subject is None else subject,
                    time_index,
                )
                template_id = SplitMix64(key).randrange(N_TEMPLATES)
                spec = QuestionSpec(
                    qtype=qtype,
                    time_index=time_index,
                    subject=subject,
                    template_id=template_id,
                )
                question = render_question(spec, taxonomy, config.templates)
                subj_tag = "x" if subject is None else f"c{subject}"
                out.append(
                    Triplet(
                        triplet_id=(
                            f"{pair.pair_id}-{qtype.value}-{subj_tag}-t{time_index}"
                        ),
                        pair_id=pair.pair_id,
                        question=question,
                        spec=spec,
                        answer=answer,
                        mask=mask,
                    )
                )
    return out


def write_jsonl(triplets: Iterable[Triplet], path: str | Path) -> None:
    with open(path, "w") as f:
        for t in triplets:
            f.write(json.dumps(t.to_json_obj()) + "\n")


def read_jsonl(path: str | Path) -> list[Triplet]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(Triplet.from_json_obj(json.loads(line)))
    return out


def split_dataset(
    triplets: list[Triplet],
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> tuple[list[Triplet], list[Triplet], list[Triplet]]:
    """Image-wise split: all triplets of a pair land in the same partition."""
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
        raise BadRatios(f"ratios {ratios} must be non-negative and sum to 1")
    pair_ids = sorted({t.pair_id for t in triplets})
    rng = SplitMix64(derive_seed(seed, "split"))
    rng.shuffle(pair_ids)
    n = len(pair_ids)
    i1 = round(n * ratios[0])
    i2 = round(n * (ratios[0] + ratios[1]))
    assignment = {}
    for idx, pid in enumerate(pair_ids):
        assignment[pid] = 0 if idx < i1 else (1 if idx < i2 else 2)
    parts: tuple[list[Triplet], ...] = ([], [], [])
    for t in triplets:
        parts[assignment[t.pair_id]].append(t)
    return parts


@dataclass
class StatsReport:
    """Dataset statistics: answer/type frequencies, mask-area deciles, lengths."""

    n_triplets: int
    n_pairs: int
    answer_freq: dict[str, int]
    type_counts: dict[str, int]
    area_ratio_hist: dict[str, int]  # keyed by ratio-bucket token
    word_len_mean: float
    word_len_min: int
    word_len_max: int

    def to_json_obj(self) -> dict:
        return {
            "n_triplets": self.n_triplets,
            "n_pairs": self.n_pairs,
            "answer_freq": self.answer_freq,
            "type_counts": self.type_counts,
            "area_ratio_hist": self.area_ratio_hist,
            "word_len": {
                "mean": self.word_len_mean,
                "min": self.word_len_min,
                "max": self.word_len_max,
            },
        }


def dataset_stats(triplets: list[Triplet]) -> StatsReport:
    if not triplets:
        raise EmptyDataset("no triplets")
    answers = Counter(t.answer for t in triplets)
    types = Counter(t.spec.qtype.value for t in triplets)
    hist = Counter()
    for t in triplets:
        hist[ratio_bucket(t.mask.popcount(), t.mask.width * t.mask.height)] += 1
    lengths = [len(t.question.split()) for t in triplets]
    return StatsReport(
        n_triplets=len(triplets),
        n_pairs=len({t.pair_id for t in triplets}),
        answer_freq=dict(sorted(answers.items())),
        type_counts={q.value: types.get(q.value, 0) for q in TYPE_ORDER},
        area_ratio_hist={b: hist.get(b, 0) for b in RATIO_BUCKETS},
        word_len_mean=float(np.mean(lengths)),
        word_len_min=int(min(lengths)),
        word_len_max=int(max(lengths)),
    )
