"""Expert-free dual-text prompt mining from report text.

Reports arrive as plain strings. The pipeline cleans them into sentences,
chunks candidate disease noun phrases with bundled lexicons and suffix
heuristics, scopes negation cues, and pairs ground-truth boxes with the
semantically closest positive phrase. Rule-based and deterministic
throughout: no learned parser, no external model.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

POSITIVE = "positive"
NEGATED = "negated"

ROLE_POSITIVE = "positive-prompt"
ROLE_NEGATIVE = "negative-prompt"

_SENTENCE_RE = re.compile(r"[^.!?]*[.!?]")
_TOKEN_RE = re.compile(r"[A-Za-z][A-Za-z']*|\d+")
_WORD_RE = re.compile(r"[a-z0-9']+")


@dataclass
class Report:
    raw_text: str
    sentences: list


@dataclass
class NounPhrase:
    text: str
    sentence_index: int
    span: tuple  # character offsets within the sentence
    polarity: str = POSITIVE


@dataclass
class DiseaseBeacon:
    phrase: NounPhrase
    role: str

    def __post_init__(self):
        if self.phrase.polarity == NEGATED and self.role == ROLE_POSITIVE:
            raise ConfigError("negated phrases can never be positive prompts")


@dataclass
class RegionTextPair:
    box_id: object
    class_label: str
    matched_phrase: str
    similarity: float


def postprocess_report(raw):
    """Split into terminated sentences, dropping the unterminated tail and
    exact duplicates; whitespace is collapsed."""
    sentences = []
    seen = set()
    for match in _SENTENCE_RE.finditer(raw or ""):
        sentence = " ".join(match.group(0).split())
        if not _TOKEN_RE.search(sentence):
            continue
        if sentence in seen:
            continue
        seen.add(sentence)
        sentences.append(sentence)
    return Report(raw_text=raw or "", sentences=sentences)


# -- part-of-speech lexicons ------------------------------------------------------

_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "no", "any", "some",
    "each", "every", "both", "either", "neither", "its",
}
_PREPOSITIONS = {
    "of", "in", "on", "at", "with", "within", "for", "to", "from", "by",
    "near", "over", "under", "above", "below", "along", "around", "into",
    "onto", "upon", "across", "against", "during", "between", "behind",
    "beyond", "through", "per", "as",
}
_CONJUNCTIONS = {"and", "or", "but", "however", "although", "while", "whereas", "nor", "yet"}
_PRONOUNS = {"there", "it", "he", "she", "they", "we", "you", "i", "who", "which", "what"}
_VERBS = {
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have",
    "had", "shows", "show", "showed", "shown", "demonstrates", "demonstrate",
    "demonstrated", "reveals", "reveal", "revealed", "suggests", "suggest",
    "suggested", "indicates", "indicate", "indicated", "appears", "appear",
    "appeared", "remains", "remain", "remained", "persists", "persist",
    "persisted", "seen", "noted", "observed", "identified", "obtained",
    "denies", "excludes", "exclude", "ruled", "rule",
}
_ADVERBS = {
    "not", "very", "mildly", "moderately", "severely", "slightly",
    "significantly", "grossly", "relatively", "otherwise", "now", "again",
    "still", "also", "probably", "possibly", "likely", "out", "clearly",
}
_ADJECTIVES = {
    "large", "small", "big", "tiny", "mild", "moderate", "severe",
    "extensive", "clear", "normal", "abnormal", "stable", "acute", "chronic",
    "patchy", "diffuse", "focal", "multifocal", "bilateral", "unilateral",
    "right", "left", "upper", "lower", "middle", "new", "old", "prominent",
    "increased", "decreased", "elevated", "blunted", "low", "high", "dense",
    "hazy", "faint", "subtle", "present", "absent", "visible",
    "unremarkable", "consistent", "prior", "free", "widespread", "scattered",
    "round", "oval", "irregular", "linear", "residual", "other", "frontal",
    "negative",
}
_ADJ_SUFFIXES = ("ous", "ive", "ary", "able", "ible", "ful", "less", "al", "ic", "ed")

_DET, _ADJ, _NOUN, _OTHER = "DET", "ADJ", "NOUN", "OTHER"


def _pos_tag(word):
    w = word.lower()
    if w in _DETERMINERS:
        return _DET
    if w in _PREPOSITIONS or w in _CONJUNCTIONS or w in _PRONOUNS or w in _VERBS or w in _ADVERBS:
        return _OTHER
    if w in _ADJECTIVES:
        return _ADJ
    if any(w.endswith(s) for s in _ADJ_SUFFIXES if len(w) > len(s) + 2):
        return _ADJ
    return _NOUN  # open-class default: unseen medical vocabulary is noun-like


def _sentence_tokens(sentence):
    return [(m.group(0), m.start(), m.end()) for m in _TOKEN_RE.finditer(sentence)]


def extract_noun_phrases(report):
    """Scan each sentence for maximal (DET)? (ADJ)* (NOUN)+ chunks.

    Determiners are stripped from the phrase text; spans cover the retained
    words only.
    """
    phrases = []
    for s_idx, sentence in enumerate(report.sentences):
        tokens = _sentence_tokens(sentence)
        tags = [_pos_tag(t[0]) for t in tokens]
        i = 0
        n = len(tokens)
        while i < n:
            j = i + 1 if tags[i] == _DET else i
            k = j
            while k < n and tags[k] == _ADJ:
                k += 1
            m = k
            while m < n and tags[m] == _NOUN:
                m += 1
            if m > k:
                text = " ".join(tok[0].lower() for tok in tokens[j:m])
                phrases.append(
                    NounPhrase(
                        text=text,
                        sentence_index=s_idx,
                        span=(tokens[j][1], tokens[m - 1][2]),
                    )
                )
                i = m
            else:
                i += 1
    return phrases


# -- negation ---------------------------------------------------------------------

NEGATION_CUES = (
    ("no",), ("without",), ("absence", "of"), ("negative", "for"),
    ("free", "of"), ("denies",), ("ruled", "out"),
)
CONJUNCTION_RESETS = {"but", "however", "although"}


def detect_negations(report, phrases):
    """Mark phrases preceded by an active negation cue in their sentence.

    A cue switches negation on; an adversative conjunction switches it off.
    Returns new phrase objects; the inputs are not mutated.
    """
    state_by_sentence = []
    for sentence in report.sentences:
        tokens = _sentence_tokens(sentence)
        words = [t[0].lower() for t in tokens]
        active = False
        state_at_char = {}
        i = 0
        while i < len(tokens):
            if words[i] in CONJUNCTION_RESETS:
                active = False
            state_at_char[tokens[i][1]] = active
            for cue in NEGATION_CUES:
                if tuple(words[i : i + len(cue)]) == cue:
                    active = True
                    break
            i += 1
        state_by_sentence.append(state_at_char)
    out = []
    for p in phrases:
        negated = state_by_sentence[p.sentence_index].get(p.span[0], False)
        out.append(
            NounPhrase(
                text=p.text,
                sentence_index=p.sentence_index,
                span=p.span,
                polarity=NEGATED if negated else POSITIVE,
            )
        )
    return out


def beacons_from_phrases(phrases):
    return [
        DiseaseBeacon(p, ROLE_NEGATIVE if p.polarity == NEGATED else ROLE_POSITIVE)
        for p in phrases
    ]


# -- word vectors -----------------------------------------------------------------


class WordVectors:
    """Cosine similarity over mean word vectors.

    Known words come from the bundled table; out-of-vocabulary words fall
    back to deterministic character-trigram hashed vectors, so any string
    has a stable nonzero embedding.
    """

    def __init__(self, table, dim):
        self.table = table
        self.dim = dim

    def word_vector(self, word):
        vec = self.table.get(word)
        if vec is not None:
            return vec
        return self._trigram_vector(word)

    def _trigram_vector(self, word):
        padded = f"^{word}$"
        vec = np.zeros(self.dim)
        for i in range(len(padded) - 2):
            digest = hashlib.md5(padded[i : i + 3].encode()).digest()
            bucket = digest[0] % self.dim
            sign = 1.0 if digest[1] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def phrase_vector(self, text):
        words = _WORD_RE.findall(text.lower())
        if not words:
            return np.zeros(self.dim)
        return np.mean([self.word_vector(w) for w in words], axis=0)

    def similarity(self, a, b):
        va, vb = self.phrase_vector(a), self.phrase_vector(b)
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            return 0.0
        return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


_FAMILIES = {
    "aorta": ["aortic", "aorta", "enlargement", "enlarged"],
    "atelectasis": ["atelectasis", "atelectatic", "collapse"],
    "calcification": ["calcification", "calcifications", "calcified"],
    "cardiac": ["cardiomegaly", "cardiac", "heart"],
    "airspace": [
        "opacity", "opacities", "consolidation", "consolidations",
        "infiltration", "infiltrate", "infiltrates", "airspace",
    ],
    "interstitial": ["interstitial", "reticular"],
    "disease": ["disease", "diseases"],
    "lung": ["lung", "lungs", "pulmonary"],
    "lesion": ["lesion", "lesions"],
    "nodule": ["nodule", "nodules", "mass", "masses"],
    "pleura": ["pleural", "pleura"],
    "effusion": ["effusion", "effusions", "fluid"],
    "thickening": ["thickening", "thickened"],
    "pneumothorax": ["pneumothorax"],
    "fibrosis": ["fibrosis", "fibrotic", "scarring"],
}

# Words that should barely move a phrase vector: size/position modifiers and
# report boilerplate.
_MODIFIERS = [
    "large", "small", "mild", "moderate", "severe", "patchy", "focal",
    "diffuse", "bilateral", "right", "left", "upper", "lower", "new", "old",
    "stable", "prominent", "subtle", "dense", "residual", "scattered",
    "other", "tiny", "extensive",
]
_GENERIC = [
    "chest", "radiograph", "image", "study", "silhouette", "mediastinum",
    "diaphragm", "signs", "evidence", "findings", "exam", "frontal",
    "degenerative", "changes", "spine", "view",
]

_VECTOR_DIM = 24
_FAMILY_WEIGHT = 1.0
_UNIQUE_WEIGHT = 0.35
_MODIFIER_WEIGHT = 0.25
_GENERIC_WEIGHT = 0.6

_clinical_vectors_cache = None


def clinical_word_vectors():
    """The bundled embedding table covering class names and report vocabulary.

    Family members share a common direction plus a small word-specific
    component, so in-family synonym pairs score high while modifiers barely
    perturb phrase means. Construction is deterministic.
    """
    global _clinical_vectors_cache
    if _clinical_vectors_cache is not None:
        return _clinical_vectors_cache
    rng = np.random.default_rng(20240917)
    basis, _ = np.linalg.qr(rng.normal(size=(_VECTOR_DIM, _VECTOR_DIM)))
    family_dirs = {name: basis[:, i] for i, name in enumerate(sorted(_FAMILIES))}
    table = {}
    members = sorted(
        (word, family) for family, words in _FAMILIES.items() for word in words
    )
    for word, family in members:
        unique = rng.normal(size=_VECTOR_DIM)
        unique /= np.linalg.norm(unique)
        table[word] = _FAMILY_WEIGHT * family_dirs[family] + _UNIQUE_WEIGHT * unique
    for word in sorted(_MODIFIERS):
        unique = rng.normal(size=_VECTOR_DIM)
        table[word] = _MODIFIER_WEIGHT * unique / np.linalg.norm(unique)
    for word in sorted(_GENERIC):
        unique = rng.normal(size=_VECTOR_DIM)
        table[word] = _GENERIC_WEIGHT * unique / np.linalg.norm(unique)
    _clinical_vectors_cache = WordVectors(table, _VECTOR_DIM)
    return _clinical_vectors_cache


def semantic_similarity(phrase, label, vectors=None):
    """Cosine similarity of mean word vectors, in [-1, 1]."""
    vectors = vectors or clinical_word_vectors()
    return vectors.similarity(phrase, label)


# -- region-text matching ----------------------------------------------------------


def _beacon_order_key(beacon):
    return (beacon.phrase.sentence_index, beacon.phrase.span[0], beacon.phrase.text)


def match_region_text(boxes, beacons, threshold, vectors=None):
    """Pair each (box_id, class_label) with its best positive beacon.

    Ties break by earliest sentence then earliest span, so the result does
    not depend on beacon list order. Boxes with no beacon above threshold
    fall back to their own class label (self-similarity 1.0). Returns the
    pairs plus the negative-prompt pool: unpaired positive beacons and all
    negated beacons, in sentence order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ConfigError(f"match threshold must be in (0, 1], got {threshold}")
    vectors = vectors or clinical_word_vectors()
    positives = sorted(
        (b for b in beacons if b.role == ROLE_POSITIVE), key=_beacon_order_key
    )
    pairs = []
    used = set()
    for box_id, class_label in boxes:
        best = None
        best_key = None
        for b in positives:
            sim = vectors.similarity(b.phrase.text, class_label)
            if sim < threshold:
                continue
            key = (-sim,) + _beacon_order_key(b)
            if best_key is None or key < best_key:
                best, best_key = (b, sim), key
        if best is None:
            pairs.append(
                RegionTextPair(
                    box_id=box_id,
                    class_label=class_label,
                    matched_phrase=class_label,
                    similarity=1.0,
                )
            )
        else:
            beacon, sim = best
            used.add(id(beacon))
            pairs.append(
                RegionTextPair(
                    box_id=box_id,
                    class_label=class_label,
                    matched_phrase=beacon.phrase.text,
                    similarity=sim,
                )
            )
    pool = [b for b in positives if id(b) not in used]
    pool += [b for b in beacons if b.role == ROLE_NEGATIVE]
    pool.sort(key=_beacon_order_key)
    return pairs, pool


def mine_report(raw_text):
    """Full report pipeline: clean, chunk, scope negations, build beacons."""
    report = postprocess_report(raw_text)
    phrases = detect_negations(report, extract_noun_phrases(report))
    return report, beacons_from_phrases(phrases)
