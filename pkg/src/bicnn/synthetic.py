"""Seeded generator of labelled mammography / chest-radiograph style reports.

Each report hides one class descriptor phrase among neutral filler
sentences. Sentence and word counts follow clipped normal distributions so
corpus statistics can be tuned to a target profile.
"""

from __future__ import annotations

import dataclasses
import statistics
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

from .text import Report, tokenize

MONTHS = [
    "January", "February", "March", "April", "May", "June",
    "July", "August", "September", "October", "November", "December",
]
SLOTS = {
    "side": ["left", "right"],
    "month": MONTHS,
    "year": [str(y) for y in range(2005, 2018)],
    "mm": [str(v) for v in range(3, 41)],
    "clock": [str(v) for v in range(1, 13)],
    "quadrant": ["upper outer", "upper inner", "lower outer", "lower inner"],
    "birads": ["1", "2", "3"],
    "rib": ["third", "fourth", "fifth", "sixth", "seventh", "eighth"],
}
RADIOLOGISTS = ["Dr. A. Chen", "Dr. M. Rossi", "Dr. K. Osei", "Dr. P. Singh", "Dr. L. Moreau"]


class InvalidSpec(ValueError):
    pass


def load_fillers(name: str) -> list[str]:
    text = resources.files("bicnn.data").joinpath(name).read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


@dataclass
class CorpusSpec:
    name: str
    class_names: list[str]
    descriptors: list[list[str]]
    counts: list[int]
    sentence_mean: float
    sentence_std: float
    words_mean: float
    words_std: float
    templates: list[str]
    fillers: list[str]
    indication: str = "Routine examination."
    noise: float = 0.0
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def validate(self) -> None:
        c = self.num_classes
        if c < 2:
            raise InvalidSpec("need at least 2 classes")
        if len(self.descriptors) != c or len(self.counts) != c:
            raise InvalidSpec("descriptors and counts must have one entry per class")
        if any(not d for d in self.descriptors):
            raise InvalidSpec("every class needs at least one descriptor phrase")
        if any(n < 0 for n in self.counts) or sum(self.counts) == 0:
            raise InvalidSpec("class counts must be non-negative with a positive total")
        if not 0.0 <= self.noise < 1.0:
            raise InvalidSpec("noise must lie in [0, 1)")
        if not self.fillers or not self.templates:
            raise InvalidSpec("filler pool and descriptor templates must be non-empty")
        if self.sentence_mean < 1 or self.words_mean < 1:
            raise InvalidSpec("sentence and word means must be >= 1")

    def scaled(self, total: int) -> "CorpusSpec":
        """Same spec with class counts rescaled to ``total`` (largest remainder)."""
        return dataclasses.replace(self, counts=scale_counts(self.counts, total))


def scale_counts(counts: Sequence[int], total: int) -> list[int]:
    raw = np.asarray(counts, dtype=float) * total / sum(counts)
    out = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - out), kind="stable")[: total - out.sum()]:
        out[i] += 1
    return out.tolist()


MRD_CLASSES = [
    "almost entirely fatty",
    "scattered areas of fibroglandular density",
    "heterogeneously dense",
    "extremely dense",
    "ambiguous",
]
MRD_DESCRIPTORS = [
    ["almost entirely fatty", "predominantly fatty", "mainly fatty", "predominantly fat", "fatty"],
    ["scattered fibroglandular densities", "scattered areas of fibroglandular density", "scattered fibroglandular tissue", "scattered"],
    ["heterogeneously dense", "heterogenous", "heterogeneous fibroglandular tissue"],
    ["extremely dense", "very dense", "dense"],
    ["mildly dense", "mild dense", "scattered to heterogeneously dense"],
]
MRD_TEMPLATES = [
    "The breasts are {d}.",
    "The breast parenchyma is {d}.",
    "The breast tissue is {d} bilaterally.",
    "The breasts show {d}.",
    "Breast composition is {d}.",
]

CRRD_CLASSES = [
    "normal",
    "cardiomegaly",
    "consolidation",
    "pulmonary edema",
    "lung nodules",
    "lung mass",
    "pleural effusion",
    "widened mediastinum",
    "vertebral fractures",
    "clavicular fracture",
    "pneumothorax",
]
CRRD_DESCRIPTORS = [
    ["no acute findings", "unremarkable study", "the cardiopericardial silhouette and hilar anatomy is within normal limits"],
    ["mild cardiomegaly", "enlarged cardiac silhouette", "cardiopericardial silhouette is enlarged"],
    ["resolving consolidation in the lower lungs bilaterally", "inhomogeneous airspace consolidation", "consolidation in the left lower lobe"],
    ["mild to moderate interstitial pulmonary edema", "airspace edema", "right pulmonary edema"],
    ["calcified granulomas present", "nodules have developed", "multiple faint bilateral pulmonary nodules"],
    ["bilateral pulmonary masses", "mass in the right upper lobe", "middle mediastinal mass"],
    ["persistent bilateral pleural effusions", "bilateral pleural effusions", "persistent loculated right pleural effusion"],
    ["widening of the superior mediastinum", "mediastinum appears widened", "mediastinum is slightly widened"],
    ["vertebral fracture", "several old vertebral compression injuries", "thoracolumbar vertebral compression injuries"],
    ["fracture deformity of the right lateral clavicle", "right lateral clavicle fracture", "old right mid clavicular fracture"],
    ["partial right upper lobe collapse", "chronic collapse of the right middle lobe", "right apical pneumothorax"],
]
CRRD_TEMPLATES = [
    "There is {d}.",
    "{D}.",
    "Findings are in keeping with {d}.",
    "Today there is {d}.",
]


def mrd_like(noise: float = 0.0, seed: int = 0) -> CorpusSpec:
    return CorpusSpec(
        name="mrd-like",
        class_names=list(MRD_CLASSES),
        descriptors=[list(d) for d in MRD_DESCRIPTORS],
        counts=[342, 1546, 1510, 436, 246],
        sentence_mean=3.21,
        sentence_std=1.27,
        words_mean=30.87,
        words_std=10.44,
        templates=list(MRD_TEMPLATES),
        fillers=load_fillers("mrd_fillers.txt"),
        indication="Screening mammogram.",
        noise=noise,
        seed=seed,
    )


def crrd_like(noise: float = 0.0, seed: int = 0) -> CorpusSpec:
    return CorpusSpec(
        name="crrd-like",
        class_names=list(CRRD_CLASSES),
        descriptors=[list(d) for d in CRRD_DESCRIPTORS],
        counts=[116, 106, 81, 104, 118, 89, 144, 50, 67, 73, 82],
        sentence_mean=2.01,
        sentence_std=1.07,
        words_mean=21.46,
        words_std=9.21,
        templates=list(CRRD_TEMPLATES),
        fillers=load_fillers("crrd_fillers.txt"),
        indication="Chest radiograph.",
        noise=noise,
        seed=seed,
    )


HARD_NOISE = 0.15

PRESETS = {
    "mrd-like": lambda seed=0: mrd_like(0.0, seed),
    "crrd-like": lambda seed=0: crrd_like(0.0, seed),
    "mrd-like-hard": lambda seed=0: dataclasses.replace(mrd_like(HARD_NOISE, seed), name="mrd-like-hard"),
    "crrd-like-hard": lambda seed=0: dataclasses.replace(crrd_like(HARD_NOISE, seed), name="crrd-like-hard"),
}


def preset(name: str, seed: int = 0) -> CorpusSpec:
    try:
        return PRESETS[name](seed)
    except KeyError:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


def _fill(template: str, rng: np.random.Generator) -> str:
    out = template
    for slot, values in SLOTS.items():
        key = "{" + slot + "}"
        while key in out:
            out = out.replace(key, values[rng.integers(len(values))], 1)
    return out


def _clipped_normal(rng: np.random.Generator, mean: float, std: float, low: int = 1) -> int:
    return max(low, int(round(rng.normal(mean, std))))


def _descriptor_sentence(spec: CorpusSpec, phrase: str, rng: np.random.Generator) -> str:
    t = spec.templates[rng.integers(len(spec.templates))]
    return t.replace("{D}", phrase[:1].upper() + phrase[1:]).replace("{d}", phrase)


def _pick_filler(spec: CorpusSpec, target: float, used: set[str], rng: np.random.Generator, tries: int = 6) -> str:
    best, best_gap = None, None
    for _ in range(tries):
        cand = _fill(spec.fillers[rng.integers(len(spec.fillers))], rng)
        if cand in used:
            continue
        gap = abs(len(tokenize(cand)) - target)
        if best is None or gap < best_gap:
            best, best_gap = cand, gap
    if best is None:
        best = _fill(spec.fillers[rng.integers(len(spec.fillers))], rng)
    return best


def _report_body(spec: CorpusSpec, label: int, rng: np.random.Generator) -> list[str]:
    n_sent = _clipped_normal(rng, spec.sentence_mean, spec.sentence_std)
    n_words = _clipped_normal(rng, spec.words_mean, spec.words_std, low=n_sent)

    phrase: str | None = spec.descriptors[label][rng.integers(len(spec.descriptors[label]))]
    if spec.noise > 0 and rng.random() < spec.noise:
        # corruption: drop the descriptor, or swap in one from another class
        if rng.random() < 0.5:
            phrase = None
        else:
            other = (label + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes
            phrase = spec.descriptors[other][rng.integers(len(spec.descriptors[other]))]

    sentences: list[str] = []
    if phrase is not None:
        desc = _descriptor_sentence(spec, phrase, rng)
        short = n_words / n_sent - len(tokenize(desc))
        if short > 5:
            # pad a short descriptor sentence with a leading filler clause
            lead = _pick_filler(spec, short, set(), rng).rstrip(".")
            desc = f"{lead}, and {desc[0].lower()}{desc[1:]}"
        sentences.append(desc)
    used = set(sentences)
    remaining = n_words - sum(len(tokenize(s)) for s in sentences)
    while len(sentences) < n_sent:
        slots_left = n_sent - len(sentences)
        s = _pick_filler(spec, remaining / slots_left, used, rng)
        used.add(s)
        sentences.append(s)
        remaining -= len(tokenize(s))
    order = rng.permutation(len(sentences))
    return [sentences[i] for i in order]


def _layout(spec: CorpusSpec, sentences: list[str], rng: np.random.Generator) -> str:
    if len(sentences) > 1:
        findings, impression = sentences[:-1], sentences[-1:]
    else:
        findings, impression = sentences, []
    lines = [f"INDICATION: {spec.indication}", "FINDINGS: " + " ".join(findings)]
    if impression:
        lines.append("IMPRESSION: " + " ".join(impression))
    lines.append(RADIOLOGISTS[rng.integers(len(RADIOLOGISTS))])
    return "\n".join(lines)


def generate(spec: CorpusSpec) -> list[Report]:
    """Generate ``sum(spec.counts)`` reports; output is a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.num_classes), spec.counts)
    labels = labels[rng.permutation(len(labels))]
    reports = []
    width = max(5, len(str(len(labels))))
    for i, label in enumerate(labels):
        body = _report_body(spec, int(label), rng)
        raw = _layout(spec, body, rng)
        reports.append(Report.from_text(f"{spec.name}-{i:0{width}d}", raw, int(label)))
    return reports


# ------------------------------------------------------------------ statistics


def split_sentences(text: str) -> list[list[str]]:
    """Period-delimited sentences as token lists, skipping empty pieces."""
    out = []
    for piece in text.replace("\n", " ").split("."):
        toks = tokenize(piece)
        if toks:
            out.append(toks)
    return out


def _describe(values: Sequence[float]) -> dict[str, float]:
    vals = [float(v) for v in values]
    return {
        "mean": statistics.fmean(vals),
        "median": statistics.median(vals),
        "std": statistics.stdev(vals) if len(vals) > 1 else 0.0,
    }


def corpus_stats(reports: Sequence[Report]) -> dict:
    """Report count, vocabulary size and sentence / word / sentence-length summaries.

    Computed on the findings and impression text. Sentence length is
    summarised over all sentences in the corpus.
    """
    if not reports:
        raise ValueError("corpus is empty")
    vocab: set[str] = set()
    n_sent, n_words, sent_len = [], [], []
    for r in reports:
        sents = split_sentences(r.body)
        toks = tokenize(r.body)
        vocab.update(toks)
        n_sent.append(len(sents))
        n_words.append(len(toks))
        sent_len.extend(len(s) for s in sents)
    return {
        "NR": len(reports),
        "VS": len(vocab),
        "ANS": _describe(n_sent),
        "ANW": _describe(n_words),
        "ASL": _describe(sent_len or [0]),
    }


def format_stats(stats: dict) -> str:
    lines = [f"NR  {stats['NR']}", f"VS  {stats['VS']}", f"{'':4}{'mean':>8}{'median':>8}{'std':>8}"]
    for key in ("ANS", "ANW", "ASL"):
        s = stats[key]
        lines.append(f"{key:4}{s['mean']:8.2f}{s['median']:8.2f}{s['std']:8.2f}")
    return "\n".join(lines)


def descriptor_rule(spec: CorpusSpec):
    """Keyword oracle: longest descriptor phrase found in the report wins.

    Returns a function ``report -> label`` (or -1 when nothing matches).
    """
    phrases = []
    for label, group in enumerate(spec.descriptors):
        for p in group:
            phrases.append((tuple(tokenize(p)), label))
    phrases.sort(key=lambda x: -len(x[0]))

    def classify(report: Report) -> int:
        toks = tokenize(report.body)
        for ph, label in phrases:
            n = len(ph)
            for i in range(len(toks) - n + 1):
                if tuple(toks[i : i + n]) == ph:
                    return label
        return -1

    return classify
