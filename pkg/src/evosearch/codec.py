"""Token vocabulary, trajectory wire format, and the character-level distance.

A trajectory is the text the agent produces after its prompt: a run of
typed spans written with atomic tag tokens and no whitespace between them,
e.g. ``<search>home of kavo</search><information>...</information><answer>x</answer>``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

THINK, THINK_END = "<think>", "</think>"
SEARCH, SEARCH_END = "<search>", "</search>"
INFO, INFO_END = "<information>", "</information>"
ANSWER, ANSWER_END = "<answer>", "</answer>"
BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"

SPECIAL_TOKENS = (
    THINK, THINK_END, SEARCH, SEARCH_END, INFO, INFO_END,
    ANSWER, ANSWER_END, BOS, EOS, PAD,
)
ORDINARY_SYMBOLS = "\n" + "".join(chr(c) for c in range(32, 127))


class EncodingError(ValueError):
    def __init__(self, char: str, offset: int):
        super().__init__(f"character {char!r} at offset {offset} is not in the vocabulary")
        self.char = char
        self.offset = offset


class TrajectoryParseError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (token {position})")
        self.position = position


@dataclass(frozen=True)
class Vocabulary:
    ordinary_symbols: str = ORDINARY_SYMBOLS
    special_tokens: tuple[str, ...] = SPECIAL_TOKENS
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.ordinary_symbols)) != len(self.ordinary_symbols):
            raise ValueError("duplicate ordinary symbols")
        index = {ch: i for i, ch in enumerate(self.ordinary_symbols)}
        base = len(self.ordinary_symbols)
        for j, tok in enumerate(self.special_tokens):
            index[tok] = base + j
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.ordinary_symbols) + len(self.special_tokens)

    def __len__(self) -> int:
        return self.size

    def id(self, symbol: str) -> int:
        return self._index[symbol]

    def token(self, token_id: int) -> str:
        n = len(self.ordinary_symbols)
        if 0 <= token_id < n:
            return self.ordinary_symbols[token_id]
        if n <= token_id < self.size:
            return self.special_tokens[token_id - n]
        raise IndexError(f"token id {token_id} out of range")

    def is_special(self, token_id: int) -> bool:
        return token_id >= len(self.ordinary_symbols)

    def encode(self, text: str) -> list[int]:
        return encode(text, self)

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.token(int(i)) for i in ids)


DEFAULT_VOCAB = Vocabulary()


def encode(text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
    """Map text to ids; literal tag strings become single special tokens."""
    ids = []
    i = 0
    index = vocab._index
    while i < len(text):
        ch = text[i]
        if ch == "<":
            for tok in vocab.special_tokens:
                if text.startswith(tok, i):
                    ids.append(index[tok])
                    i += len(tok)
                    break
            else:
                ids.append(index[ch])
                i += 1
            continue
        tid = index.get(ch)
        if tid is None or ch in vocab.special_tokens:
            raise EncodingError(ch, i)
        ids.append(tid)
        i += 1
    return ids


class SpanKind(enum.Enum):
    THINK = "think"
    SEARCH = "search"
    INFORMATION = "information"
    ANSWER = "answer"


OPEN_TAGS = {THINK: SpanKind.THINK, SEARCH: SpanKind.SEARCH, INFO: SpanKind.INFORMATION, ANSWER: SpanKind.ANSWER}
CLOSE_TAGS = {THINK_END: SpanKind.THINK, SEARCH_END: SpanKind.SEARCH, INFO_END: SpanKind.INFORMATION, ANSWER_END: SpanKind.ANSWER}
TAG_OF = {kind: (o, c) for (o, kind), c in zip(OPEN_TAGS.items(), CLOSE_TAGS)}


@dataclass(frozen=True)
class Span:
    """A tagged segment; ``start``/``end`` cover both tags (half-open)."""

    kind: SpanKind
    text: str
    start: int
    end: int
    closed: bool = True

    @property
    def token_range(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class Trajectory:
    tokens: tuple[int, ...]
    spans: tuple[Span, ...]
    policy_positions: frozenset[int]
    distill_positions: frozenset[int]
    complete: bool
    # engine-written forcing text between the last </information> and the next span
    forced_range: tuple[int, int] | None = None
    forced_text: str = ""

    @property
    def answer(self) -> str | None:
        for span in self.spans:
            if span.kind is SpanKind.ANSWER:
                return span.text
        return None

    @property
    def n_srch(self) -> int:
        return sum(1 for s in self.spans if s.kind is SpanKind.SEARCH and s.closed)

    @property
    def n_info(self) -> int:
        return sum(1 for s in self.spans if s.kind is SpanKind.INFORMATION)

    def __len__(self) -> int:
        return len(self.tokens)

    def policy_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.tokens), dtype=bool)
        if self.policy_positions:
            mask[sorted(self.policy_positions)] = True
        return mask

    def distill_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.tokens), dtype=bool)
        if self.distill_positions:
            mask[sorted(self.distill_positions)] = True
        return mask


def parse_trajectory(tokens: Sequence[int], vocab: Vocabulary = DEFAULT_VOCAB) -> Trajectory:
    """Split post-prompt tokens into typed spans and compute the position sets.

    Raises TrajectoryParseError on unmatched or illegally nested tags.
    A missing or unterminated answer gives ``complete=False``.
    """
    tokens = tuple(int(t) for t in tokens)
    ids = {tok: vocab.id(tok) for tok in vocab.special_tokens}
    open_by_id = {ids[t]: k for t, k in OPEN_TAGS.items()}
    close_by_id = {ids[t]: k for t, k in CLOSE_TAGS.items()}
    forbidden = {ids[BOS], ids[EOS], ids[PAD]}

    spans: list[Span] = []
    policy: set[int] = set()
    forced_range = None
    forced_chars: list[str] = []
    current: SpanKind | None = None
    start = 0
    chars: list[str] = []

    for pos, tid in enumerate(tokens):
        if tid in forbidden:
            raise TrajectoryParseError(f"unexpected {vocab.token(tid)}", pos)
        if spans and spans[-1].kind is SpanKind.ANSWER:
            raise TrajectoryParseError("tokens after the answer span", pos)
        if current is None:
            if tid in open_by_id:
                kind = open_by_id[tid]
                prev = spans[-1].kind if spans else None
                if kind is SpanKind.INFORMATION and (prev is not SpanKind.SEARCH or spans[-1].end != pos):
                    raise TrajectoryParseError("information must directly follow a search span", pos)
                current, start, chars = kind, pos, []
            elif tid in close_by_id:
                raise TrajectoryParseError(f"unmatched {vocab.token(tid)}", pos)
            else:
                # plain text between spans is only legal as forcing text after information
                prev = spans[-1].kind if spans else None
                if forced_range is None:
                    if prev is not SpanKind.INFORMATION or spans[-1].end != pos:
                        raise TrajectoryParseError("text outside any span", pos)
                    forced_range = (pos, pos + 1)
                elif forced_range[1] == pos:
                    forced_range = (forced_range[0], pos + 1)
                else:
                    raise TrajectoryParseError("text outside any span", pos)
                forced_chars.append(vocab.token(tid))
            continue
        if tid in open_by_id:
            raise TrajectoryParseError(f"{vocab.token(tid)} nested inside {current.value}", pos)
        if tid in close_by_id:
            if close_by_id[tid] is not current:
                raise TrajectoryParseError(f"{vocab.token(tid)} closes {current.value}", pos)
            spans.append(Span(current, "".join(chars), start, pos + 1))
            if current is not SpanKind.INFORMATION:
                policy.update(range(start, pos + 1))
            current = None
            continue
        chars.append(vocab.token(tid))

    if current is not None:
        spans.append(Span(current, "".join(chars), start, len(tokens), closed=False))
        if current is not SpanKind.INFORMATION:
            policy.update(range(start, len(tokens)))
    complete = bool(spans) and spans[-1].kind is SpanKind.ANSWER and spans[-1].closed
    frozen = frozenset(policy)
    return Trajectory(
        tokens=tokens,
        spans=tuple(spans),
        policy_positions=frozen,
        distill_positions=frozen,
        complete=complete,
        forced_range=forced_range,
        forced_text="".join(forced_chars),
    )


def serialize_trajectory(traj: Trajectory, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    parts = []
    for span in traj.spans:
        open_tag, close_tag = TAG_OF[span.kind]
        parts.append(open_tag + span.text + (close_tag if span.closed else ""))
        if traj.forced_range is not None and span.end == traj.forced_range[0]:
            parts.append(traj.forced_text)
    if traj.forced_range is not None and not traj.spans:
        parts.append(traj.forced_text)
    return "".join(parts)


def parse_text(text: str, vocab: Vocabulary = DEFAULT_VOCAB) -> Trajectory:
    return parse_trajectory(encode(text, vocab), vocab)


def policy_text(traj: Trajectory) -> str:
    """Serialized trajectory with information spans and forcing text removed."""
    parts = []
    for span in traj.spans:
        if span.kind is SpanKind.INFORMATION:
            continue
        open_tag, close_tag = TAG_OF[span.kind]
        parts.append(open_tag + span.text + (close_tag if span.closed else ""))
    return "".join(parts)


def char_distance(a: str, b: str) -> int:
    """Levenshtein distance (unit insert/delete/substitute costs)."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    bv = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    ramp = np.arange(len(b) + 1, dtype=np.int64)
    prev = ramp.copy()
    for i, ch in enumerate(a, start=1):
        sub = prev[:-1] + (bv != ord(ch))
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(prev[1:] + 1, sub)
        # insertion chain: cur[j] = min_k<=j cur[k] + (j - k)
        cur = np.minimum.accumulate(cur - ramp) + ramp
        prev = cur
    return int(prev[-1])


DISTANCE_TEXT_MODES = ("full", "policy")


def trajectory_distance(a: Trajectory, b: Trajectory, mode: str = "full") -> int:
    if mode == "full":
        return char_distance(serialize_trajectory(a), serialize_trajectory(b))
    if mode == "policy":
        return char_distance(policy_text(a), policy_text(b))
    raise ValueError(f"unknown distance mode {mode!r}; expected one of {DISTANCE_TEXT_MODES}")


@dataclass(frozen=True)
class RolloutRecord:
    question_id: str
    trajectory: Trajectory
    reward: int
    n_srch: int
    length: int

    @classmethod
    def build(cls, question_id: str, trajectory: Trajectory, reward: int) -> "RolloutRecord":
        return cls(question_id, trajectory, int(reward), trajectory.n_srch, len(trajectory.tokens))

    @property
    def text(self) -> str:
        return serialize_trajectory(self.trajectory)

    def to_json(self) -> str:
        return json.dumps(
            {
                "question_id": self.question_id,
                "trajectory_text": self.text,
                "reward": self.reward,
                "n_srch": self.n_srch,
                "length": self.length,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str, vocab: Vocabulary = DEFAULT_VOCAB) -> "RolloutRecord":
        row = json.loads(line)
        traj = parse_text(row["trajectory_text"], vocab)
        rec = cls(row["question_id"], traj, int(row["reward"]), int(row["n_srch"]), int(row["length"]))
        if rec.n_srch != traj.n_srch or rec.length != len(traj.tokens):
            raise ValueError(f"inconsistent record for question {rec.question_id}")
        return rec

