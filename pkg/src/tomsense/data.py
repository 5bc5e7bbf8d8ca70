"""Toy vocabulary, the synthetic belief-tracking grammar and the general corpus.

Stories follow the false-belief task families of the classic ToM test
batteries: *unexpected transfer* (conditions FB/NT/IP/PP) and *unexpected
contents* (FB/CL/IP/OC). Every prompt ends right before a single-token
answer, so scoring is an exact next-token match.
"""

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

BOS = "<bos>"
PAD = "<pad>"
EOS = "<eos>"
SPECIALS = (PAD, BOS, EOS)

NAMES = ("alice", "bob", "carol", "dave", "erin", "frank", "grace", "henry", "ivy", "jack", "kate", "liam")
OBJECTS = ("keys", "ball", "book", "coin", "ring", "hat", "map", "pen", "cup", "toy")
PLACES = ("drawer", "basket", "cabinet", "shelf", "chest", "closet", "bucket", "crate", "locker", "trunk")
CONTAINERS = ("box", "bag", "jar", "tin", "case", "pot")
CONTENTS = ("popcorn", "chocolate", "candy", "apples", "cookies", "nuts", "rice", "tea", "beans", "grapes")
FUNCTION_WORDS = (
    "the", "a", "in", "to", "is", "puts", "leaves", "moves", "returns", "finds", "watches", "tells",
    "looks", "for", "label", "says", "holds", "reads", "thinks", "inside", "opens", "it", "and",
    "sees", "walks", "away", "then", "please", "repeat", "every", "single", "word", "of", "following",
    "text", ".", ":",
)

UNEXPECTED_TRANSFER = "unexpected_transfer"
UNEXPECTED_CONTENTS = "unexpected_contents"
TASK_CONDITIONS = {
    UNEXPECTED_CONTENTS: ("FB", "CL", "IP", "OC"),
    UNEXPECTED_TRANSFER: ("FB", "NT", "IP", "PP"),
}
CONDITIONS = ("FB", "CL", "IP", "OC", "NT", "PP")

LOCALIZATION_PREFIX = "please repeat every single word of the following text :"
LOCALIZATION_SUFFIX = "repeat every single word of the text :"


class DatasetError(ValueError):
    pass


class Vocab:
    """Whitespace word-level vocabulary; ``Vocab.bytes()`` gives the byte-level option."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if len(set(tokens)) != len(tokens):
            raise DatasetError("duplicate vocabulary entries")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}
        self.byte_level = False

    @classmethod
    def toy(cls) -> "Vocab":
        words = []
        for group in (FUNCTION_WORDS, NAMES, OBJECTS, PLACES, CONTAINERS, CONTENTS):
            words.extend(w for w in group if w not in words)
        return cls(list(SPECIALS) + words)

    @classmethod
    def bytes(cls) -> "Vocab":
        v = cls([f"<0x{i:02x}>" for i in range(256)])
        v.byte_level = True
        return v

    @classmethod
    def from_file(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(self.itos) + "\n")

    def __len__(self):
        return len(self.itos)

    @property
    def bos_id(self):
        return self.stoi.get(BOS)

    @property
    def eos_id(self):
        return self.stoi.get(EOS)

    @property
    def pad_id(self):
        return self.stoi.get(PAD, 0)

    def encode(self, text: str) -> list:
        if self.byte_level:
            return list(text.encode("utf-8"))
        out = []
        for w in text.split():
            if w not in self.stoi:
                raise DatasetError(f"token {w!r} not in vocabulary")
            out.append(self.stoi[w])
        return out

    def decode(self, ids) -> str:
        if self.byte_level:
            return bytes(int(i) for i in ids).decode("utf-8", errors="replace")
        return " ".join(self.itos[int(i)] for i in ids)

    def single_token(self, text: str) -> int:
        ids = self.encode(text)
        if len(ids) != 1:
            raise DatasetError(f"target {text!r} is {len(ids)} tokens, expected exactly one")
        return ids[0]


@dataclass
class ToMExample:
    context: str
    prompts: list  # [(prompt text, target token text)]
    task: str
    condition: str
    seed: int = 0

    def __post_init__(self):
        if not self.prompts:
            raise DatasetError("ToM example needs at least one prompt")
        if self.task not in TASK_CONDITIONS:
            raise DatasetError(f"unknown task {self.task!r}")
        if self.condition not in TASK_CONDITIONS[self.task]:
            raise DatasetError(f"condition {self.condition} is not valid under {self.task}")
        self.prompts = [tuple(p) for p in self.prompts]

    def to_record(self) -> dict:
        return {
            "context": self.context,
            "prompts": [{"text": t, "target": y} for t, y in self.prompts],
            "task": self.task,
            "condition": self.condition,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ToMExample":
        return cls(
            rec["context"],
            [(p["text"], p["target"]) for p in rec["prompts"]],
            rec["task"],
            rec["condition"],
            rec.get("seed", 0),
        )

    def encoded_prompts(self, vocab: Vocab):
        """[(token ids of <bos> context prompt, target id)] with single-token targets enforced."""
        out = []
        for text, target in self.prompts:
            ids = ([vocab.bos_id] if vocab.bos_id is not None else []) + vocab.encode(self.context + " " + text)
            try:
                tid = vocab.single_token(target)
            except DatasetError as e:
                raise DatasetError(f"example (seed {self.seed}, {self.task}/{self.condition}): {e}") from None
            out.append((ids, tid))
        return out


def _transfer_story(rng, condition):
    a, b = rng.choice(NAMES, size=2, replace=False)
    obj = rng.choice(OBJECTS)
    l1, l2 = rng.choice(PLACES, size=2, replace=False)
    first = f"{a} puts the {obj} in the {l1} ."
    away = f"{a} watches ." if condition == "PP" else f"{a} leaves ."
    if condition == "NT":
        middle = f"{b} finds the {obj} in the {l1} ."
    else:
        middle = f"{b} moves the {obj} to the {l2} ."
    last = f"{b} tells {a} ." if condition == "IP" else f"{a} returns ."
    reality = l1 if condition == "NT" else l2
    belief = l1 if condition in ("FB", "NT") else l2
    prompts = [(f"the {obj} is in the", reality), (f"{a} looks for the {obj} in the", belief)]
    return " ".join((first, away, middle, last)), prompts


def _contents_story(rng, condition):
    a, b = rng.choice(NAMES, size=2, replace=False)
    box = rng.choice(CONTAINERS)
    label, real = rng.choice(CONTENTS, size=2, replace=False)
    if condition == "CL":
        label = real
    first = f"the {box} label says {label} ."
    second = f"the {box} holds {real} ."
    third = f"{a} finds the {box} ."
    if condition == "IP":
        last = f"{b} tells {a} it holds {real} ."
    elif condition == "OC":
        last = f"{a} opens it and looks inside ."
    else:
        last = f"{a} reads the label ."
    belief = label if condition in ("FB", "CL") else real
    prompts = [(f"the {box} holds", real), (f"{a} thinks the {box} holds", belief)]
    return " ".join((first, second, third, last)), prompts


def generate_tom_dataset(n: int, seed: int = 0, tasks=None, conditions=None) -> list:
    """``n`` stories cycling through every (task, condition) bucket."""
    rng = np.random.default_rng([seed, 7])
    buckets = []
    for task in tasks or TASK_CONDITIONS:
        for cond in TASK_CONDITIONS[task]:
            if conditions is None or cond in conditions:
                buckets.append((task, cond))
    out = []
    for i in range(n):
        task, cond = buckets[i % len(buckets)]
        maker = _transfer_story if task == UNEXPECTED_TRANSFER else _contents_story
        ctx, prompts = maker(rng, cond)
        out.append(ToMExample(ctx, prompts, task, cond, seed))
    return out


def save_tom_jsonl(examples, path):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def load_tom_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(ToMExample.from_record(json.loads(line)))
            except (KeyError, json.JSONDecodeError, DatasetError) as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
    return out


def generate_corpus(n_sentences: int, seed: int = 0) -> str:
    """General narrative text from the same world, without any question prompts."""
    rng = np.random.default_rng([seed, 11])
    sents = []
    while len(sents) < n_sentences:
        a, b = rng.choice(NAMES, size=2, replace=False)
        obj = rng.choice(OBJECTS)
        l1, l2 = rng.choice(PLACES, size=2, replace=False)
        box = rng.choice(CONTAINERS)
        food = rng.choice(CONTENTS)
        kind = rng.integers(8)
        sents.append(
            (
                f"{a} puts the {obj} in the {l1} .",
                f"{b} moves the {obj} to the {l2} .",
                f"{a} walks away .",
                f"the {box} holds {food} .",
                f"{b} opens the {box} and sees {food} .",
                f"{a} reads the label .",
                f"{a} tells {b} the {obj} is in the {l1} .",
                f"{b} finds a {obj} in the {box} then leaves .",
            )[kind]
        )
    return " ".join(sents)


def fingerprint_records(records) -> str:
    """Content hash for any JSON-serializable sequence (dataset provenance)."""
    h = hashlib.sha256()
    for r in records:
        if isinstance(r, ToMExample):
            r = r.to_record()
        elif isinstance(r, np.ndarray):
            r = r.tolist()
        h.update(json.dumps(r, sort_keys=True, default=_json_default).encode())
        h.update(b"\n")
    return h.hexdigest()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dict__"):
        return o.__dict__
    raise TypeError(type(o))


def tom_training_sequences(examples, vocab: Vocab) -> list:
    """Story + prompt + answer token sequences for language-model training."""
    out = []
    for ex in examples:
        for ids, tid in ex.encoded_prompts(vocab):
            out.append(ids + [tid])
    return out


def corpus_windows(stream, window: int, bos_id=None, stride=None) -> list:
    """Split a token stream into windows of ``window`` tokens (optionally BOS-prefixed)."""
    stream = list(stream)
    stride = stride or window
    out = []
    for start in range(0, len(stream) - window + 1, stride):
        w = stream[start : start + window]
        out.append(([bos_id] if bos_id is not None else []) + w)
    return out


def localization_prompt(segment_ids, vocab: Vocab) -> list:
    pre = ([vocab.bos_id] if vocab.bos_id is not None else []) + vocab.encode(LOCALIZATION_PREFIX)
    return pre + list(segment_ids) + vocab.encode(LOCALIZATION_SUFFIX)


def localization_training_sequences(stream, vocab: Vocab, n: int, lengths, seed: int = 0) -> list:
    """Prompt + verbatim copy + <eos>, so the toy model learns the repeat task."""
    rng = np.random.default_rng([seed, 13])
    stream = list(stream)
    out = []
    for i in range(n):
        L = int(lengths[i % len(lengths)])
        start = int(rng.integers(0, len(stream) - L + 1))
        seg = stream[start : start + L]
        out.append(localization_prompt(seg, vocab) + seg + [vocab.eos_id])
    return out
