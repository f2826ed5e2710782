import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdet.errors import ConfigError
from spdet.prompts import (
    NEGATED,
    POSITIVE,
    ROLE_NEGATIVE,
    ROLE_POSITIVE,
    DiseaseBeacon,
    NounPhrase,
    beacons_from_phrases,
    clinical_word_vectors,
    detect_negations,
    extract_noun_phrases,
    match_region_text,
    mine_report,
    postprocess_report,
    semantic_similarity,
)


class TestPostprocessReport:
    def test_exact_duplicates_collapse(self):
        rep = postprocess_report("Heart is enlarged. Heart is enlarged.")
        assert rep.sentences == ["Heart is enlarged."]

    def test_unterminated_tail_dropped(self):
        rep = postprocess_report("Lungs clear. The costophre")
        assert rep.sentences == ["Lungs clear."]

    def test_empty_report(self):
        assert postprocess_report("").sentences == []

    def test_whitespace_normalized(self):
        rep = postprocess_report("Lungs   are\nclear.")
        assert rep.sentences == ["Lungs are clear."]

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet="abc no.! ?", max_size=60))
    def test_idempotent(self, raw):
        once = postprocess_report(raw)
        twice = postprocess_report(" ".join(once.sentences))
        assert twice.sentences == once.sentences


class TestNounPhrases:
    def phrases(self, text):
        return [p.text for p in extract_noun_phrases(postprocess_report(text))]

    def test_det_adj_noun_chunk(self):
        assert self.phrases("There is a large pleural effusion.") == ["large pleural effusion"]

    def test_bare_noun(self):
        assert self.phrases("Cardiomegaly.") == ["cardiomegaly"]

    def test_predicate_adjective_excluded(self):
        assert self.phrases("The lungs are clear.") == ["lungs"]

    def test_compound_class_names_chunk_whole(self):
        assert self.phrases("The study shows interstitial lung disease.") == [
            "study",
            "interstitial lung disease",
        ]
        assert self.phrases("There is aortic enlargement.") == ["aortic enlargement"]

    def test_spans_lie_in_sentence(self):
        report = postprocess_report("No evidence of pleural effusion. Lungs are clear.")
        for p in extract_noun_phrases(report):
            sentence = report.sentences[p.sentence_index]
            assert 0 <= p.span[0] < p.span[1] <= len(sentence)
            assert sentence[p.span[0] : p.span[1]].lower() == p.text


class TestNegation:
    def polarity(self, text):
        report = postprocess_report(text)
        tagged = detect_negations(report, extract_noun_phrases(report))
        return {p.text: p.polarity for p in tagged}

    def test_no_cue(self):
        pol = self.polarity("No signs of pneumonia.")
        assert pol["pneumonia"] == NEGATED

    def test_plain_statement_positive(self):
        assert self.polarity("Effusion is present.")["effusion"] == POSITIVE

    def test_conjunction_resets_scope(self):
        pol = self.polarity("No effusion, but consolidation persists.")
        assert pol["effusion"] == NEGATED
        assert pol["consolidation"] == POSITIVE

    def test_multiword_cues(self):
        assert self.polarity("Absence of pneumothorax.")["pneumothorax"] == NEGATED
        assert self.polarity("Negative for cardiomegaly.")["cardiomegaly"] == NEGATED

    def test_scope_stays_within_sentence(self):
        pol = self.polarity("No effusion. Consolidation is seen.")
        assert pol["effusion"] == NEGATED
        assert pol["consolidation"] == POSITIVE

    def test_negated_phrase_cannot_become_positive_prompt(self):
        phrase = NounPhrase("effusion", 0, (0, 8), polarity=NEGATED)
        with pytest.raises(ConfigError):
            DiseaseBeacon(phrase, ROLE_POSITIVE)


class TestSemanticSimilarity:
    def test_self_similarity(self):
        for term in ("cardiomegaly", "pleural effusion", "zzqx"):
            assert semantic_similarity(term, term) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_one_hot_vectors(self):
        from spdet.prompts import WordVectors

        table = {"aa": np.array([1.0, 0.0]), "bb": np.array([0.0, 1.0])}
        vec = WordVectors(table, 2)
        assert vec.similarity("aa", "bb") == 0.0

    def test_synonym_overlap_ordering(self):
        close = semantic_similarity("opacity", "consolidation")
        far = semantic_similarity("opacity", "cardiomegaly")
        assert close > far
        assert close > 0.6

    def test_modifiers_barely_dilute(self):
        assert semantic_similarity("large pleural effusion", "pleural effusion") > 0.9

    def test_range(self):
        v = clinical_word_vectors()
        for a in ("cardiomegaly", "large nodule", "frontal chest radiograph"):
            for b in ("pleural effusion", "pneumothorax"):
                assert -1.0 <= v.similarity(a, b) <= 1.0


def beacon(text, sentence=0, start=0, polarity=POSITIVE):
    phrase = NounPhrase(text, sentence, (start, start + len(text)), polarity)
    role = ROLE_NEGATIVE if polarity == NEGATED else ROLE_POSITIVE
    return DiseaseBeacon(phrase, role)


class TestMatchRegionText:
    def test_exact_match(self):
        pairs, pool = match_region_text(
            [(0, "pneumonia")], [beacon("pneumonia")], threshold=0.6
        )
        assert pairs[0].matched_phrase == "pneumonia"
        assert pairs[0].similarity == pytest.approx(1.0)
        assert pool == []

    def test_negated_beacon_forces_fallback(self):
        pairs, pool = match_region_text(
            [(0, "pneumonia")], [beacon("pneumonia", polarity=NEGATED)], threshold=0.6
        )
        assert pairs[0].matched_phrase == "pneumonia"  # class-label fallback
        assert pairs[0].similarity == 1.0
        assert [b.phrase.text for b in pool] == ["pneumonia"]
        assert pool[0].role == ROLE_NEGATIVE

    def test_empty_beacons_fall_back(self):
        pairs, pool = match_region_text([(0, "nodule"), (1, "cardiomegaly")], [], 0.6)
        assert [p.matched_phrase for p in pairs] == ["nodule", "cardiomegaly"]
        assert pool == []

    def test_invalid_threshold(self):
        with pytest.raises(ConfigError):
            match_region_text([], [], threshold=1.01)
        with pytest.raises(ConfigError):
            match_region_text([], [], threshold=0.0)

    def test_tie_breaks_by_sentence_then_span(self):
        b_late = beacon("cardiomegaly", sentence=2, start=4)
        b_early = beacon("cardiomegaly", sentence=1, start=9)
        pairs, _ = match_region_text([(0, "cardiomegaly")], [b_late, b_early], 0.6)
        assert pairs[0].matched_phrase == "cardiomegaly"
        _, pool = match_region_text([(0, "cardiomegaly")], [b_late, b_early], 0.6)
        assert [b.phrase.sentence_index for b in pool] == [2]

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(5))))
    def test_permutation_invariant(self, order):
        beacons = [
            beacon("large pleural effusion", 0, 3),
            beacon("pleural effusion", 1, 0),
            beacon("cardiomegaly", 1, 20),
            beacon("pneumothorax", 2, 0, polarity=NEGATED),
            beacon("frontal chest radiograph", 0, 0),
        ]
        shuffled = [beacons[i] for i in order]
        boxes = [(0, "pleural effusion"), (1, "cardiomegaly")]
        base_pairs, base_pool = match_region_text(boxes, beacons, 0.6)
        pairs, pool = match_region_text(boxes, shuffled, 0.6)
        assert [(p.box_id, p.matched_phrase, p.similarity) for p in pairs] == [
            (p.box_id, p.matched_phrase, p.similarity) for p in base_pairs
        ]
        assert [b.phrase.text for b in pool] == [b.phrase.text for b in base_pool]

    def test_every_box_yields_exactly_one_pair(self):
        boxes = [(i, name) for i, name in enumerate(["nodule", "nodule", "pneumothorax"])]
        pairs, _ = match_region_text(boxes, [beacon("nodule", 0, 0)], 0.6)
        assert [p.box_id for p in pairs] == [0, 1, 2]


class TestMineReport:
    def test_full_pipeline(self):
        report, beacons = mine_report(
            "Frontal chest radiograph. There is a large pleural effusion. "
            "No evidence of pneumothorax."
        )
        assert len(report.sentences) == 3
        by_text = {b.phrase.text: b.role for b in beacons}
        assert by_text["large pleural effusion"] == ROLE_POSITIVE
        assert by_text["pneumothorax"] == ROLE_NEGATIVE
        assert by_text["frontal chest radiograph"] == ROLE_POSITIVE

    def test_negated_never_in_pairs(self):
        report, beacons = mine_report("No evidence of cardiomegaly. Nodule is present.")
        pairs, pool = match_region_text([(0, "nodule"), (1, "cardiomegaly")], beacons, 0.6)
        negated_texts = {b.phrase.text for b in beacons if b.role == ROLE_NEGATIVE}
        for p in pairs:
            assert p.matched_phrase not in negated_texts or p.matched_phrase == p.class_label
        # cardiomegaly is only mentioned negated: must fall back to the label
        assert pairs[1].matched_phrase == "cardiomegaly"
        assert pairs[1].similarity == 1.0
