"""Templated reports, their grammar, and multi-granular QA derivation."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .world import ORGANS, QUADRANTS, SIZE_RANGE, TEXTURES, THICKNESS_RANGE

GRANULARITIES = ("coarse", "medium", "fine")
SIZE_TOKEN = "[size]"
NODULE_PHRASE = "hypoechoic nodule"

# organ -> (anatomy region, secondary region), in report order
REGIONS = {
    "breast": ("glandular layer", "ducts"),
    "thyroid": ("thyroid lobe", "isthmus"),
}
SECONDARY = {
    "breast": ("the ducts are not dilated.", "the ducts are dilated."),
    "thyroid": ("the isthmus is normal.", "the isthmus is thickened."),
}

PRESENCE_Q = "Is there a nodule?"
LOCATION_Q = "Where is the nodule?"
SIZE_Q = "What is the size of the nodule?"

_NUMBER = re.compile(r"\b\d+(?:\.\d+)?\b")
_SENTENCE = re.compile(r"[^.]+\.")
_QUAD = "|".join(re.escape(q) for q in QUADRANTS)
_ANATOMY = re.compile(
    r"^the (glandular layer|thyroid lobe) is (\d+) units thick with (smooth|coarse) echotexture\.$"
)
_NODULE = re.compile(rf"^a hypoechoic nodule of (\d+) units is seen in the ({_QUAD}) region\.$")
_NO_NODULE = "no obvious nodule is seen."


class ReportParseError(ValueError):
    pass


@dataclass(frozen=True)
class QAPair:
    granularity: str
    question: str
    answer: str

    def __post_init__(self):
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if not self.answer.strip():
            raise ValueError("answer must be non-empty")

    def to_json(self):
        return {"granularity": self.granularity, "question": self.question, "answer": self.answer}


@dataclass(frozen=True)
class ParsedReport:
    organ: str
    regions: tuple  # ((region name, sentence), ...) in report order
    nodule_sentence: str
    nodule_present: bool
    quadrant: str | None


def mask_numbers(text):
    return _NUMBER.sub(SIZE_TOKEN, text)


def render_report(scene):
    anatomy_region, _ = REGIONS[scene.organ]
    sentences = [
        f"the {anatomy_region} is {scene.thickness_units} units thick with {scene.echo_texture} echotexture.",
        SECONDARY[scene.organ][int(scene.secondary_abnormal)],
    ]
    if scene.nodule_present:
        sentences.append(
            f"a {NODULE_PHRASE} of {scene.size_units} units is seen in the {scene.quadrant} region."
        )
    else:
        sentences.append(_NO_NODULE)
    return " ".join(sentences)


def split_sentences(report):
    sentences = [s.strip() for s in _SENTENCE.findall(report)]
    rest = _SENTENCE.sub("", report).strip()
    if rest:
        raise ReportParseError(f"trailing text without a full stop: {rest!r}")
    return sentences


def parse_report(report):
    """Recover regions and nodule findings; raises on any unknown sentence."""
    sentences = split_sentences(report)
    organ = None
    regions = []
    nodule_sentence = None
    present = False
    quadrant = None
    for s in sentences:
        m = _ANATOMY.match(s)
        if m:
            organ = "breast" if m.group(1) == "glandular layer" else "thyroid"
            regions.append((m.group(1), s))
            continue
        matched_secondary = False
        for org, options in SECONDARY.items():
            if s in options:
                regions.append((REGIONS[org][1], s))
                matched_secondary = True
        if matched_secondary:
            continue
        m = _NODULE.match(s)
        if m:
            nodule_sentence, present, quadrant = s, True, m.group(2)
            continue
        if s == _NO_NODULE:
            nodule_sentence, present = s, False
            continue
        raise ReportParseError(f"unparseable sentence: {s!r}")
    if organ is None or nodule_sentence is None or len(regions) != 2:
        raise ReportParseError(f"report is missing an anatomy or nodule sentence: {report!r}")
    return ParsedReport(organ, tuple(regions), nodule_sentence, present, quadrant)


def coarse_question(organ):
    return f"Describe the {organ} ultrasound image."


def region_question(region):
    return f"Describe the {region}."


def derive_qa(scene, report):
    """Coarse, medium (one per region) and fine QA pairs, numerals masked.

    Location and size questions are only asked when a nodule is present.
    """
    parsed = parse_report(report)
    if parsed.organ != scene.organ or parsed.nodule_present != scene.nodule_present:
        raise ReportParseError(f"report disagrees with scene {scene.id}: {report!r}")
    pairs = [QAPair("coarse", coarse_question(parsed.organ), mask_numbers(report))]
    for region, sentence in parsed.regions:
        pairs.append(QAPair("medium", region_question(region), mask_numbers(sentence)))
    pairs.append(QAPair("fine", PRESENCE_Q, "yes" if parsed.nodule_present else "no"))
    if parsed.nodule_present:
        pairs.append(QAPair("fine", LOCATION_Q, f"in the {parsed.quadrant} region"))
        pairs.append(QAPair("fine", SIZE_Q, SIZE_TOKEN))
    return pairs


def mentions_nodule(report):
    return NODULE_PHRASE in report


def template_corpus():
    """Every sentence form the templates can produce, for a closed vocabulary."""
    texts = [PRESENCE_Q, LOCATION_Q, SIZE_Q, "yes", "no", SIZE_TOKEN, _NO_NODULE]
    for organ in ORGANS:
        texts.append(coarse_question(organ))
        texts.extend(region_question(r) for r in REGIONS[organ])
        texts.extend(SECONDARY[organ])
        for tex in TEXTURES:
            for t in range(THICKNESS_RANGE[0], THICKNESS_RANGE[1] + 1):
                texts.append(f"the {REGIONS[organ][0]} is {t} units thick with {tex} echotexture.")
    for q in QUADRANTS:
        texts.append(f"in the {q} region")
        for s in range(SIZE_RANGE[0], SIZE_RANGE[1] + 1):
            texts.append(f"a {NODULE_PHRASE} of {s} units is seen in the {q} region.")
    return texts
