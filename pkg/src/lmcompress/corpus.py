"""Seeded generator of an English-like corpus for desk-scale experiments.

The text has the statistical features that make word-level language
modelling non-trivial: Zipfian word frequencies, part-of-speech structure,
subject/verb number agreement carried across prepositional phrases and
relative clauses, and paragraph-level topics that bias noun and verb choice.
Output follows the PTB layout: lower case, one sentence per line, numbers
mapped to ``N``.
"""

from __future__ import annotations

import numpy as np

_ONSETS = ["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v",
           "w", "br", "cr", "dr", "fl", "gr", "pl", "pr", "sk", "sl", "st", "tr", "ch", "sh", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "oo", "ou", "ie"]
_CODAS = ["", "", "n", "r", "l", "s", "t", "m", "nd", "rt", "st", "ck", "ng"]

_FUNCTION = {
    "det_sg": ["the", "a", "this", "that", "every", "each"],
    "det_pl": ["the", "these", "those", "some", "many", "few", "all"],
    "prep": ["of", "in", "on", "with", "for", "from", "near", "about", "under", "after"],
    "rel": ["that", "which"],
    "conj": ["and", "but", "while", "because"],
    "aux_sg": ["does", "was", "has"],
    "aux_pl": ["do", "were", "have"],
    "pron_sg": ["he", "she", "it"],
    "pron_pl": ["they", "we"],
}


def _pseudo_words(rng, count, taken, min_syl=1, max_syl=3):
    words = []
    while len(words) < count:
        n = rng.integers(min_syl, max_syl + 1)
        w = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(n)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if w not in taken and not w.endswith("s"):
            taken.add(w)
            words.append(w)
    return words


def _zipf(rng, n, a=1.1):
    p = 1.0 / np.arange(1, n + 1) ** a
    return p / p.sum()


class _Lexicon:
    def __init__(self, rng, n_nouns, n_verbs, n_adjs, n_advs, n_names, n_topics):
        taken = set(w for ws in _FUNCTION.values() for w in ws)
        self.nouns = _pseudo_words(rng, n_nouns, taken)
        self.verbs = _pseudo_words(rng, n_verbs, taken)
        self.adjs = [w + "y" for w in _pseudo_words(rng, n_adjs, taken, 1, 2)]
        self.advs = [w + "ly" for w in _pseudo_words(rng, n_advs, taken, 1, 2)]
        self.names = [w.capitalize().lower() + "o" for w in _pseudo_words(rng, n_names, taken, 2, 2)]
        self.n_topics = n_topics
        # each topic prefers a random permutation of nouns / verbs / adjectives
        self.topic_nouns = [rng.permutation(n_nouns) for _ in range(n_topics)]
        self.topic_verbs = [rng.permutation(n_verbs) for _ in range(n_topics)]
        self.topic_adjs = [rng.permutation(n_adjs) for _ in range(n_topics)]
        self.p_noun = _zipf(rng, n_nouns)
        self.p_verb = _zipf(rng, n_verbs)
        self.p_adj = _zipf(rng, n_adjs)
        self.p_adv = _zipf(rng, n_advs)
        self.p_name = _zipf(rng, n_names)
        # verbs that take an object vs. intransitive ones
        self.transitive = rng.random(n_verbs) < 0.6


class _SentenceMaker:
    def __init__(self, rng, lex: _Lexicon):
        self.rng = rng
        self.lex = lex
        self.topic = 0

    def pick(self, seq):
        return seq[self.rng.integers(len(seq))]

    def noun(self, plural):
        lex = self.lex
        i = lex.topic_nouns[self.topic][self.rng.choice(len(lex.nouns), p=lex.p_noun)]
        w = lex.nouns[i]
        return w + "s" if plural else w

    def adj(self):
        lex = self.lex
        return lex.adjs[lex.topic_adjs[self.topic][self.rng.choice(len(lex.adjs), p=lex.p_adj)]]

    def verb_index(self):
        lex = self.lex
        return int(lex.topic_verbs[self.topic][self.rng.choice(len(lex.verbs), p=lex.p_verb)])

    def verb(self, plural, tense, i=None):
        i = self.verb_index() if i is None else i
        stem = self.lex.verbs[i]
        if tense == "past":
            return [stem + "ed"]
        if self.rng.random() < 0.15:
            aux = self.pick(_FUNCTION["aux_pl" if plural else "aux_sg"])
            if aux in ("does", "do"):
                return [aux, "not", stem]
            if aux in ("has", "have"):
                return [aux, stem + "ed"]
            return [aux, stem + "ing"]
        return [stem if plural else stem + "s"]

    def noun_phrase(self, plural, depth=0):
        r = self.rng.random()
        if r < 0.08 and depth == 0:
            return [self.lex.names[self.rng.choice(len(self.lex.names), p=self.lex.p_name)]], False
        if r < 0.15 and depth == 0:
            return [self.pick(_FUNCTION["pron_pl" if plural else "pron_sg"])], plural
        words = [self.pick(_FUNCTION["det_pl" if plural else "det_sg"])]
        if self.rng.random() < 0.06:
            words.append("N")
        while self.rng.random() < 0.35 and len(words) < 4:
            words.append(self.adj())
        words.append(self.noun(plural))
        if depth < 1:
            r = self.rng.random()
            if r < 0.25:
                words.append(self.pick(_FUNCTION["prep"]))
                words += self.noun_phrase(self.rng.random() < 0.4, depth + 1)[0]
            elif r < 0.35:
                words.append(self.pick(_FUNCTION["rel"]))
                words += self.verb_phrase(plural, "present", depth + 1)
        return words, plural

    def verb_phrase(self, plural, tense, depth=0):
        i = self.verb_index()
        words = self.verb(plural, tense, i)
        if self.rng.random() < 0.15:
            words.append(self.lex.advs[self.rng.choice(len(self.lex.advs), p=self.lex.p_adv)])
        if self.lex.transitive[i]:
            words += self.noun_phrase(self.rng.random() < 0.4, depth + 1)[0]
        if depth == 0 and self.rng.random() < 0.3:
            words.append(self.pick(_FUNCTION["prep"]))
            words += self.noun_phrase(self.rng.random() < 0.4, 1)[0]
        return words

    def clause(self, tense):
        plural = bool(self.rng.random() < 0.4)
        subj, plural = self.noun_phrase(plural)
        return subj + self.verb_phrase(plural, tense)

    def sentence(self, tense):
        words = self.clause(tense)
        if self.rng.random() < 0.25:
            words.append(self.pick(_FUNCTION["conj"]))
            words += self.clause(tense)
        return " ".join(words)


def synthetic_corpus(n_bytes: int = 200_000, seed: int = 0, *, n_nouns=600, n_verbs=250,
                     n_adjs=200, n_advs=40, n_names=60, n_topics=8) -> str:
    """Return roughly ``n_bytes`` of newline-separated sentences."""
    rng = np.random.default_rng(seed)
    lex = _Lexicon(rng, n_nouns, n_verbs, n_adjs, n_advs, n_names, n_topics)
    maker = _SentenceMaker(rng, lex)
    lines, size = [], 0
    while size < n_bytes:
        maker.topic = int(rng.integers(n_topics))
        tense = "past" if rng.random() < 0.5 else "present"
        for _ in range(int(rng.integers(3, 9))):
            line = maker.sentence(tense)
            lines.append(line)
            size += len(line) + 1
            if size >= n_bytes:
                break
    return "\n".join(lines) + "\n"


def split_corpus(text: str, valid_frac=0.1, test_frac=0.1):
    """Split by lines into contiguous train / valid / test blocks."""
    lines = text.splitlines(keepends=True)
    n = len(lines)
    n_test = int(n * test_frac)
    n_valid = int(n * valid_frac)
    n_train = n - n_valid - n_test
    return (
        "".join(lines[:n_train]),
        "".join(lines[n_train : n_train + n_valid]),
        "".join(lines[n_train + n_valid :]),
    )
