"""User task-specification front-ends: language, points, and demonstrations.

All three produce the same TaskRepresentation, so downstream grounding and
control never know which modality the user chose. The language front-end is
a closed rule-based grammar (deterministic and total over the simulator's
instruction templates); the point front-end averages pixel embeddings in a
3x3 window around each click; the demonstration front-end delegates to
gradient-based representation tuning.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .encoder import AttributeVocabulary
from .grounding import AFFORDANCE_TYPES, TaskRepresentation, rep_from_slot_tokens
from .worldsim import COLORS

CATEGORIES = ("table", "cup", "basket", "brush", "snack")
SUBREGIONS = ("handle", "head")
MOTION_TOKENS = ("slow", "fast", "left_to_right", "right_to_left")

# surface noun -> candidate canonical categories (more than one = ambiguous)
SYNONYMS = {
    "mug": ("cup",),
    "teacup": ("cup",),
    "duster": ("brush",),
    "broom": ("brush",),
    "sweeper": ("brush",),
    "cleaning tool": ("brush",),
    "bin": ("basket",),
    "tote": ("basket",),
    "hamper": ("basket",),
    "treat": ("snack",),
    "cracker": ("snack",),
    "desk": ("table",),
    "rack": ("table",),
    "container": ("basket", "cup"),
}

# descriptive words carrying no grounding signal in the toy encoder
ADJECTIVES = ("small", "big", "woven", "fluffy", "wooden", "plastic")

MOTION_ADVERBIALS = {
    "slowly": "slow",
    "quickly": "fast",
    "from left to right": "left_to_right",
    "from right to left": "right_to_left",
}

# pattern -> affordance slot for each placeholder; "it" is a literal pronoun
VERB_TEMPLATES = (
    ("walk to {target} avoiding {hazard}", {"target": "walk_to", "hazard": "avoid"}),
    ("walk to {target}", {"target": "walk_to"}),
    ("pick up {obj} and place it in {dst}", {"obj": "grasp", "dst": "place"}),
    ("pick up {obj}", {"obj": "grasp"}),
    ("grasp {obj}", {"obj": "grasp"}),
    ("place {obj} in {dst}", {"obj": "grasp", "dst": "place"}),
    ("place {obj} on {dst}", {"obj": "grasp", "dst": "place"}),
    ("put {obj} in {dst}", {"obj": "grasp", "dst": "place"}),
    ("sweep {obj} into {dst} using {tool}",
     {"obj": "indirect_contact", "dst": "place", "tool": "__tool__"}),
    ("step on {obj}", {"obj": "step_on"}),
    ("touch {obj}", {"obj": "direct_contact"}),
)


class SpecError(Exception):
    pass


class UnknownVerbError(SpecError):
    def __init__(self, verb, clause):
        super().__init__(f"no verb template matches {verb!r} in clause {clause!r}")
        self.verb = verb


class UnknownNounError(SpecError):
    def __init__(self, token):
        super().__init__(f"unknown noun token: {token!r}")
        self.token = token


class AmbiguousParseError(SpecError):
    def __init__(self, clause, alternatives):
        alts = "; ".join(alternatives)
        super().__init__(f"ambiguous parse of {clause!r}: could be {alts}")
        self.alternatives = list(alternatives)


@dataclass
class ParsedSubtask:
    slots: dict  # affordance name -> token tuple
    motion: str | None
    template: str


@dataclass
class PointSpec:
    """Click-based specification: affordance name -> (camera id, (u, v))."""

    clicks: dict
    motion_token: str | None = None


def default_vocabulary(master_seed=0, m=16):
    """Vocabulary covering every token the simulator and grammar can emit."""
    tokens = [*COLORS, *CATEGORIES, *SUBREGIONS, *MOTION_TOKENS]
    return AttributeVocabulary(tokens, master_seed=master_seed, m=m)


# ---------------------------------------------------------------------------
# language


def _normalize(text):
    text = text.lower()
    text = re.sub(r"[.!?]", "", text)
    return re.sub(r"\s+", " ", text).strip()


def split_clauses(text):
    """Split an instruction into subtask clauses on ';' and 'then'."""
    parts = re.split(r";|,?\s*\bthen\b", _normalize(text))
    clauses = [p.strip().strip(",").strip() for p in parts]
    return [c for c in clauses if c]


def _strip_motion(clause):
    for phrase in sorted(MOTION_ADVERBIALS, key=len, reverse=True):
        pattern = rf"(?:,\s*)?\b{re.escape(phrase)}\b"
        if re.search(pattern, clause):
            return re.sub(pattern, "", clause).strip(), MOTION_ADVERBIALS[phrase]
    return clause, None


def _resolve_noun_phrase(phrase):
    """Resolve 'the? adjective* color? noun+ subregion?' to token tuples.

    Colors become tokens; plain adjectives are dropped (they carry no signal
    in the toy encoder); the remaining words must name a category or a
    registered (possibly multi-word) synonym.
    """
    words = phrase.split()
    if words and words[0] in ("the", "a", "an"):
        words = words[1:]
    color = None
    while words and (words[0] in COLORS or words[0] in ADJECTIVES):
        if words[0] in COLORS:
            color = words[0]
        words = words[1:]
    subregion = None
    if len(words) > 1 and words[-1] in SUBREGIONS:
        subregion = words[-1]
        words = words[:-1]
    noun = " ".join(words)
    if not noun:
        raise UnknownNounError(phrase)
    if noun in CATEGORIES:
        cats = (noun,)
    elif noun in SYNONYMS:
        cats = SYNONYMS[noun]
    else:
        raise UnknownNounError(noun)
    out = []
    for cat in cats:
        tokens = [color] if color else []
        tokens.append(cat)
        if subregion:
            tokens.append(subregion)
        out.append(tuple(tokens))
    return out


def _template_regex(pattern):
    out = []
    for word in pattern.split():
        if word.startswith("{"):
            out.append(rf"(?P<{word[1:-1]}>.+?)")
        else:
            out.append(re.escape(word))
    return re.compile(r"^" + r"\s+".join(out) + r"$")


_COMPILED_TEMPLATES = [(p, _template_regex(p), slots) for p, slots in VERB_TEMPLATES]


def _expand_tool_slots(slots):
    """The sweep tool fills both grasp (handle) and function (head)."""
    out = {}
    for name, tokens in slots.items():
        if name == "__tool__":
            out["grasp"] = (*tokens, "handle")
            out["function"] = (*tokens, "head")
        else:
            out[name] = tokens
    return out


def parse_structure(text):
    """Parse an instruction into per-subtask affordance slots (token tuples).

    Raises UnknownVerbError / UnknownNounError / AmbiguousParseError rather
    than guessing; 'it' corefers to the most recent grasped entity.
    """
    if not _normalize(text):
        raise SpecError("instruction is empty")
    subtasks = []
    last_object = None
    for clause in split_clauses(text):
        clause, motion = _strip_motion(clause)
        candidates = []
        for pattern, regex, slot_map in _COMPILED_TEMPLATES:
            m = regex.match(clause)
            if not m:
                continue
            try:
                resolved = _resolve_template(m, slot_map, last_object, clause)
            except UnknownNounError:
                continue
            candidates.extend((pattern, r) for r in resolved)
        if not candidates:
            # distinguish a verb miss from a noun miss for error quality
            for pattern, regex, slot_map in _COMPILED_TEMPLATES:
                m = regex.match(clause)
                if m:
                    _resolve_template(m, slot_map, last_object, clause)  # raises
            raise UnknownVerbError(clause.split()[0], clause)
        if len(candidates) > 1:
            raise AmbiguousParseError(
                clause, [f"{pat}: {slots}" for pat, slots in candidates])
        pattern, slots = candidates[0]
        slots = _expand_tool_slots(slots)
        if "grasp" in slots:
            last_object = tuple(t for t in slots["grasp"] if t not in SUBREGIONS)
        subtasks.append(ParsedSubtask(slots, motion, pattern))
    return subtasks


def _resolve_template(match, slot_map, last_object, clause):
    """All consistent slot resolutions of one matched template."""
    per_slot = []
    for placeholder, slot_name in slot_map.items():
        phrase = match.group(placeholder).strip()
        if phrase in ("it", "the it"):
            if last_object is None:
                raise SpecError(f"pronoun 'it' has no antecedent in {clause!r}")
            options = [last_object]
        else:
            options = _resolve_noun_phrase(phrase)
        per_slot.append((slot_name, options))
    resolutions = [{}]
    for slot_name, options in per_slot:
        resolutions = [{**r, slot_name: opt} for r in resolutions for opt in options]
    return resolutions


def parse_instruction(text, vocab):
    """Instruction text -> one TaskRepresentation per subtask clause."""
    return [rep_from_slot_tokens(vocab, sub.slots, sub.motion)
            for sub in parse_structure(text)]


# ---------------------------------------------------------------------------
# points


def _entity_window_embedding(emb_img, id_img, pixel):
    """3x3 window mean restricted to the clicked pixel's entity, renormalized.

    Desk-scale objects can span only a pixel or two, so an unrestricted
    window mean would be dominated by background; masking by the clicked
    entity keeps the window average on the object the user pointed at.
    """
    u, v = pixel
    h, w = id_img.shape
    if not (0 <= u < w and 0 <= v < h):
        raise IndexError(f"pixel {(u, v)} outside image of size {(w, h)}")
    eid = id_img[v, u]
    if eid == 0:
        raise SpecError(f"click at {(u, v)} hit the background")
    block = emb_img[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2]
    mask = id_img[max(v - 1, 0):v + 2, max(u - 1, 0):u + 2] == eid
    avg = block[mask].mean(axis=0)
    norm = np.linalg.norm(avg)
    return avg if norm == 0.0 else avg / norm


def points_to_taskrep(obs, embedding_images, spec, vocab=None):
    """Click-based specification over per-camera pixel-embedding images.

    embedding_images maps camera id -> (H, W, M) array aligned with the
    observation's views. Each clicked slot's embedding is the 3x3 window
    mean around the click, restricted to the clicked entity's pixels;
    unused slots stay zero.
    """
    if not spec.clicks:
        raise SpecError("point specification contains no clicks")
    m = next(iter(embedding_images.values())).shape[-1]
    channels = np.zeros((len(AFFORDANCE_TYPES), m))
    for name, (camera_id, pixel) in spec.clicks.items():
        if name not in AFFORDANCE_TYPES:
            raise SpecError(f"unknown affordance channel: {name!r}")
        if camera_id not in embedding_images:
            raise SpecError(f"unknown camera: {camera_id!r}")
        channels[AFFORDANCE_TYPES.index(name)] = _entity_window_embedding(
            embedding_images[camera_id], obs.views[camera_id].entity_id, pixel)
    motion = np.zeros(m)
    if spec.motion_token is not None:
        if vocab is None:
            raise SpecError("a vocabulary is required to embed the motion token")
        motion = vocab.vector(spec.motion_token)
    return TaskRepresentation(channels, motion)


# ---------------------------------------------------------------------------
# demonstrations


def demos_to_taskrep(demos, policy, tuning_config):
    """Few-shot demonstrations -> tuned TaskRepresentation.

    Thin delegation to the adaptation module (frozen policy, gradient steps
    on the representation only); returns the tuned representation.
    """
    from . import adaptation

    result = adaptation.heatmap_tune(demos, policy, tuning_config)
    return result.representation
