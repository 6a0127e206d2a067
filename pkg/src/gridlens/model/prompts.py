"""Token inventory, prompt templates and answer formats.

Inputs follow ``{System} {Image} {Task}``: a fixed system preamble, one
``<img>`` placeholder per grid cell, then the task instruction. Every
template has a fixed length for a given class count, so answer positions are
the same for every scene under a template.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

LOCALIZE = "localize"
CLASSIFY_LIST = "classify_list"
CLASSIFY_BINARY = "classify_binary"
TEMPLATES = (LOCALIZE, CLASSIFY_LIST, CLASSIFY_BINARY)

SYSTEM_TEXT = "<bos> A chat between a user and a vision assistant ."
TASK_TEXT = {
    LOCALIZE: "USER : Please provide the bounding box coordinates of the {class} . ASSISTANT :",
    CLASSIFY_BINARY: "USER : Is there a {class} in the image ? ASSISTANT :",
    CLASSIFY_LIST: "USER : List all objects in the image . Choose only from {classes} . ASSISTANT :",
}

SPECIALS = ("<bos>", "<img>", "<end>", "<pad>", "<none>")
TEMPLATE_TOKENS = ("[", ",", "]", "<end>")
BASE_CLASS_NAMES = ("person", "car", "dog", "cat", "chair", "bottle", "bird", "cup", "horse", "clock")


def class_names(n_classes: int) -> tuple[str, ...]:
    if n_classes <= len(BASE_CLASS_NAMES):
        return BASE_CLASS_NAMES[:n_classes]
    return BASE_CLASS_NAMES + tuple(f"class{i}" for i in range(len(BASE_CLASS_NAMES), n_classes))


def _words() -> list[str]:
    seen: list[str] = []
    texts = [SYSTEM_TEXT] + list(TASK_TEXT.values())
    for text in texts:
        for w in text.split():
            if w.startswith("{") or w in SPECIALS or w in seen:
                continue
            seen.append(w)
    return seen


@dataclass(frozen=True)
class Vocab:
    grid_size: int
    n_classes: int

    @cached_property
    def tokens(self) -> tuple[str, ...]:
        coords = tuple(str(i) for i in range(self.grid_size))
        fixed = ("yes", "no", "[", ",", "]")
        words = tuple(w for w in _words() if w not in fixed and w not in coords)
        return SPECIALS + coords + class_names(self.n_classes) + fixed + words

    @cached_property
    def ids(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.ids[token]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.ids[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def coord(self, k: int) -> int:
        return self.ids[str(k)]

    def class_token(self, c: int) -> int:
        return self.ids[class_names(self.n_classes)[c]]

    @property
    def coord_ids(self) -> list[int]:
        return [self.coord(k) for k in range(self.grid_size)]

    @property
    def class_ids(self) -> list[int]:
        return [self.class_token(c) for c in range(self.n_classes)]

    def class_of_token(self, token_id: int) -> int | None:
        try:
            return self.class_ids.index(int(token_id))
        except ValueError:
            return None


def system_words() -> list[str]:
    return SYSTEM_TEXT.split()


def task_words(template: str, class_id: int | None, n_classes: int) -> list[str]:
    if template not in TASK_TEXT:
        raise ValueError(f"unknown prompt template {template!r}; expected one of {TEMPLATES}")
    names = class_names(n_classes)
    out: list[str] = []
    for w in TASK_TEXT[template].split():
        if w == "{class}":
            if class_id is None:
                raise ValueError(f"template {template!r} needs a class argument")
            out.append(names[class_id])
        elif w == "{classes}":
            for i, name in enumerate(names):
                if i:
                    out.append(",")
                out.append(name)
        else:
            out.append(w)
    return out


@dataclass(frozen=True)
class Layout:
    """Absolute positions for one template.

    The token at ``answer_start + j`` is answer token j; it is predicted from
    position ``answer_start + j - 1``.
    """

    template: str
    n_system: int
    image_start: int
    image_stop: int
    answer_start: int

    @property
    def prompt_len(self) -> int:
        return self.answer_start

    def predictor(self, j: int) -> int:
        return self.answer_start + j - 1


def layout(template: str, grid_size: int, n_classes: int) -> Layout:
    s = len(system_words())
    img = grid_size * grid_size
    t = len(task_words(template, 0, n_classes))
    return Layout(template, s, s, s + img, s + img + t)


def answer_length(template: str, n_classes: int) -> int:
    return {LOCALIZE: 10, CLASSIFY_BINARY: 2, CLASSIFY_LIST: n_classes + 1}[template]


def box_answer(box: Sequence[int]) -> list[str]:
    x0, y0, x1, y1 = box
    return ["[", str(x0), ",", str(y0), ",", str(x1), ",", str(y1), "]", "<end>"]


def binary_answer(present: bool) -> list[str]:
    return ["yes" if present else "no", "<end>"]


def list_answer(present_classes, n_classes: int) -> list[str]:
    """One slot per class in class order: its name if present, else ``<none>``."""
    names = class_names(n_classes)
    present = set(present_classes)
    return [names[c] if c in present else "<none>" for c in range(n_classes)] + ["<end>"]


def template_mask(answer_words: Sequence[str]) -> list[bool]:
    """True where the answer token is fixed formatting excluded from perplexity."""
    return [w in TEMPLATE_TOKENS for w in answer_words]
