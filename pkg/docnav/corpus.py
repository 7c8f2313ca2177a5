from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import (
    Any,
    Dict,
    FrozenSet,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
)

from PIL import Image, ImageDraw, ImageFont

from docnav.log_helper import log
from docnav.types import NOT_ANSWERABLE, AnswerKind

"""
Document/QA data model, the on-disk corpus layout, the synthetic corpus generator
and the visual token cost model.

On-disk layout:

    <root>/docs/<doc_id>/page_0001.png    page images, 1-based, zero-padded
    <root>/docs/<doc_id>/page_0001.txt    optional UTF-8 text layer
    <root>/qa.jsonl                       one QAItem per line

Page text is only consumed by the lexical retriever and by the scripted agents.
Agents talking to the environment only ever see page images and page labels.
"""

MAX_PAGE_WIDTH = 1024
MAX_PAGE_HEIGHT = 768
PATCH_SIZE = 28

PAGE_FILE_RE = re.compile(r"page_(\d{4,})\.png")
PAGE_TEXT_RE = re.compile(r"page_(\d{4,})\.txt")

# Rendering of synthetic pages
TEXT_MARGIN = 40
LINE_SPACING = 34
FONT_SIZE = 22


class CorpusError(Exception):
    pass


class CorpusLoadError(CorpusError):
    pass


class CorpusValidationError(CorpusError):
    def __init__(self, violations: List[str]):
        super().__init__(f"{len(violations)} corpus violation(s): {'; '.join(violations[:5])}")
        self.violations = violations


class SynthSpecError(CorpusError):
    pass


def page_token_cost(width: int, height: int) -> int:
    """Visual tokens of an image under the 28-pixel square patch model."""
    return math.ceil(width / PATCH_SIZE) * math.ceil(height / PATCH_SIZE)


def fit_within(
    width: int, height: int, max_width: int = MAX_PAGE_WIDTH, max_height: int = MAX_PAGE_HEIGHT
) -> Tuple[int, int]:
    """Aspect-preserving size that fits the cap. Never upsamples."""
    scale = min(1.0, max_width / width, max_height / height)
    if scale == 1.0:
        return width, height
    return (
        max(1, min(max_width, round(width * scale))),
        max(1, min(max_height, round(height * scale))),
    )


@lru_cache(maxsize=1)
def _page_font() -> ImageFont.FreeTypeFont:
    return ImageFont.load_default(size=FONT_SIZE)


def render_text_page(width: int, height: int, lines: Sequence[str]) -> Image.Image:
    """Render text lines black on white, top to bottom."""
    img = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(img)
    y = TEXT_MARGIN
    for line in lines:
        if y + LINE_SPACING > height:
            break
        draw.text((TEXT_MARGIN, y), line, fill="black", font=_page_font())
        y += LINE_SPACING
    return img


@dataclass(frozen=True)
class Page:
    index: int
    width: int
    height: int
    text: Optional[Tuple[str, ...]] = None
    # Source image on disk, rescaled on access when larger than the cap
    path: Optional[Path] = field(default=None, compare=False)
    raster: Optional[Image.Image] = field(default=None, repr=False, compare=False)

    def image(self) -> Image.Image:
        """Page raster at its stored (capped) size.

        Loaded or rendered on every call; callers that need it repeatedly cache it.
        """
        if self.raster is not None:
            return self.raster
        if self.path is not None:
            with Image.open(self.path) as src:
                img = src.convert("RGB")
            if img.size != (self.width, self.height):
                img = img.resize((self.width, self.height), Image.Resampling.BOX)
            return img
        return render_text_page(self.width, self.height, self.text or ())

    @property
    def token_cost(self) -> int:
        return page_token_cost(self.width, self.height)

    @property
    def text_body(self) -> str:
        return "\n".join(self.text or ())


@dataclass(frozen=True)
class Document:
    doc_id: str
    pages: Tuple[Page, ...]

    @property
    def n_pages(self) -> int:
        return len(self.pages)

    def page(self, index: int) -> Page:
        """Page by its 1-based absolute index."""
        if not 1 <= index <= len(self.pages):
            raise IndexError(f"page {index} out of range for document {self.doc_id}")
        return self.pages[index - 1]

    def full_token_cost(self) -> int:
        return sum(p.token_cost for p in self.pages)


@dataclass(frozen=True)
class QAItem:
    qa_id: str
    doc_id: str
    question: str
    gold_answers: Tuple[str, ...]
    answer_kind: AnswerKind
    evidence_pages: FrozenSet[int]

    @property
    def answerable(self) -> bool:
        return self.answer_kind is not AnswerKind.UNANSWERABLE

    @classmethod
    def from_json(cls, d: Dict[str, Any]) -> QAItem:
        return QAItem(
            qa_id=str(d["qa_id"]),
            doc_id=str(d["doc_id"]),
            question=d["question"],
            gold_answers=tuple(d["gold_answers"]),
            answer_kind=AnswerKind(d["answer_kind"]),
            evidence_pages=frozenset(int(i) for i in d.get("evidence_pages", [])),
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "qa_id": self.qa_id,
            "doc_id": self.doc_id,
            "question": self.question,
            "gold_answers": list(self.gold_answers),
            "answer_kind": str(self.answer_kind),
            "evidence_pages": sorted(self.evidence_pages),
        }


@dataclass(frozen=True)
class Corpus:
    documents: Dict[str, Document]
    qa_items: Tuple[QAItem, ...]

    def document(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document {doc_id}") from None

    def qa_by_id(self) -> Dict[str, QAItem]:
        return {qa.qa_id: qa for qa in self.qa_items}

    def n_pages(self) -> int:
        return sum(doc.n_pages for doc in self.documents.values())


def validate_corpus(corpus: Corpus) -> List[str]:
    """Check every type invariant, return one message per violation."""
    violations: List[str] = []

    for doc_id, doc in corpus.documents.items():
        if doc.doc_id != doc_id:
            violations.append(f"document key {doc_id} holds document {doc.doc_id}")
        if not doc.pages:
            violations.append(f"document {doc_id} has no pages")
        seen = set()
        for pos, page in enumerate(doc.pages, start=1):
            if page.index in seen:
                violations.append(f"document {doc_id}: duplicate page index {page.index}")
            elif page.index != pos:
                violations.append(
                    f"document {doc_id}: page index {page.index} at position {pos} is not contiguous"
                )
            seen.add(page.index)
            if page.width < 1 or page.height < 1:
                violations.append(f"document {doc_id}: page {page.index} has empty size")
            if page.width > MAX_PAGE_WIDTH or page.height > MAX_PAGE_HEIGHT:
                violations.append(
                    f"document {doc_id}: page {page.index} is {page.width}x{page.height}, "
                    f"above the {MAX_PAGE_WIDTH}x{MAX_PAGE_HEIGHT} cap"
                )

    qa_ids = set()
    for qa in corpus.qa_items:
        if qa.qa_id in qa_ids:
            violations.append(f"qa {qa.qa_id}: duplicate qa_id")
        qa_ids.add(qa.qa_id)

        if not qa.gold_answers:
            violations.append(f"qa {qa.qa_id}: empty gold_answers")

        doc = corpus.documents.get(qa.doc_id)
        if doc is None:
            violations.append(f"qa {qa.qa_id}: unknown document {qa.doc_id}")
        else:
            out_of_range = sorted(i for i in qa.evidence_pages if not 1 <= i <= doc.n_pages)
            if out_of_range:
                violations.append(
                    f"qa {qa.qa_id}: evidence pages {out_of_range} out of range 1..{doc.n_pages}"
                )

        if qa.answer_kind is AnswerKind.UNANSWERABLE:
            if qa.evidence_pages:
                violations.append(f"qa {qa.qa_id}: unanswerable item lists evidence pages")
            if [" ".join(a.lower().split()) for a in qa.gold_answers] != [NOT_ANSWERABLE]:
                violations.append(
                    f"qa {qa.qa_id}: unanswerable item must have gold_answers ['{NOT_ANSWERABLE}']"
                )
        elif not qa.evidence_pages:
            violations.append(f"qa {qa.qa_id}: answerable item without evidence pages")

    return violations


def _read_qa_lines(path: Path) -> Iterator[QAItem]:
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield QAItem.from_json(json.loads(line))
            except (ValueError, KeyError, TypeError) as e:
                raise CorpusLoadError(f"{path}:{lineno}: malformed qa record: {e}") from e


def load_qa_items(root: Path) -> List[QAItem]:
    """Read only qa.jsonl, without touching page files."""
    qa_path = Path(root) / "qa.jsonl"
    if not qa_path.exists():
        raise CorpusLoadError(f"{qa_path} does not exist")
    return list(_read_qa_lines(qa_path))


def _load_document(doc_dir: Path) -> Document:
    doc_id = doc_dir.name
    by_index: Dict[int, Path] = {}
    text_indices: Set[int] = set()
    for path in doc_dir.iterdir():
        if (m := PAGE_FILE_RE.fullmatch(path.name)) is not None:
            by_index[int(m.group(1))] = path
        elif (m := PAGE_TEXT_RE.fullmatch(path.name)) is not None:
            text_indices.add(int(m.group(1)))

    if not by_index:
        raise CorpusLoadError(f"document {doc_id} has no page files")
    for index in range(1, max(by_index) + 1):
        if index not in by_index:
            raise CorpusLoadError(f"document {doc_id}: missing page file page_{index:04d}.png")
    # removed trailing images leave their text layers behind
    orphans = sorted(i for i in text_indices if i not in by_index)
    if orphans:
        index = orphans[0]
        raise CorpusLoadError(
            f"document {doc_id}: page_{index:04d}.txt has no image, "
            f"missing page file page_{index:04d}.png"
        )

    pages = []
    for index in sorted(by_index):
        path = by_index[index]
        try:
            with Image.open(path) as img:
                width, height = fit_within(*img.size)
        except OSError as e:
            raise CorpusLoadError(f"document {doc_id}: cannot read page {index}: {e}") from e
        text_path = path.with_suffix(".txt")
        text = None
        if text_path.exists():
            text = tuple(text_path.read_text(encoding="utf-8").splitlines())
        pages.append(Page(index=index, width=width, height=height, text=text, path=path))
    return Document(doc_id=doc_id, pages=tuple(pages))


def load_corpus(root: Path) -> Corpus:
    root = Path(root)
    docs_dir = root / "docs"
    if not docs_dir.is_dir():
        raise CorpusLoadError(f"{docs_dir} is not a directory")

    documents = {}
    for doc_dir in sorted(p for p in docs_dir.iterdir() if p.is_dir()):
        doc = _load_document(doc_dir)
        documents[doc.doc_id] = doc

    corpus = Corpus(documents=documents, qa_items=tuple(load_qa_items(root)))
    violations = validate_corpus(corpus)
    if violations:
        raise CorpusValidationError(violations)

    log.info(
        f"loaded corpus from {root}: {len(documents)} documents, "
        f"{corpus.n_pages()} pages, {len(corpus.qa_items)} qa items"
    )
    return corpus


def write_corpus(corpus: Corpus, root: Path):
    """Write the corpus in the on-disk layout. Output is byte-stable for equal corpora."""
    root = Path(root)
    for doc in corpus.documents.values():
        doc_dir = root / "docs" / doc.doc_id
        doc_dir.mkdir(parents=True, exist_ok=True)
        for page in doc.pages:
            page.image().save(doc_dir / f"page_{page.index:04d}.png", format="PNG")
            if page.text is not None:
                (doc_dir / f"page_{page.index:04d}.txt").write_text(
                    "".join(f"{line}\n" for line in page.text), encoding="utf-8"
                )

    with (root / "qa.jsonl").open("w", encoding="utf-8") as f:
        for qa in corpus.qa_items:
            f.write(json.dumps(qa.to_json()) + "\n")


#
# Synthetic corpora with planted facts
#

ATTRIBUTES = (
    "budget",
    "capacity",
    "deadline",
    "owner",
    "location",
    "revenue",
    "headcount",
    "warranty",
    "supplier",
    "rating",
    "tariff",
    "mileage",
)
SYLLABLES = ("ka", "zor", "vex", "tri", "mul", "pen", "dro", "qui", "sal", "tho", "rin", "gav")
ADJECTIVES = ("amber", "silent", "northern", "crimson", "hollow", "brisk", "golden", "quiet")
NOUNS = ("harbor", "meadow", "lantern", "orchard", "canyon", "bridge", "summit", "garden")
FILLER_WORDS = (
    "annual",
    "review",
    "section",
    "overview",
    "figures",
    "appendix",
    "summary",
    "report",
    "notes",
    "table",
    "chart",
    "division",
    "quarter",
    "policy",
    "schedule",
    "memo",
    "draft",
    "index",
    "records",
    "update",
)
FILLER_LINES_PER_PAGE = 8

SINGLE_HOP_QUESTION = re.compile(r"What is the (\w+) of (\w+)\?")
TWO_HOP_QUESTION = re.compile(r"What is the (\w+) of the unit that manages (\w+)\?")


@dataclass(frozen=True)
class SynthSpec:
    n_docs: int = 20
    pages_min: int = 12
    pages_max: int = 12
    facts_per_doc: int = 4
    multi_hop_fraction: float = 0.0
    unanswerable_fraction: float = 0.0
    identifier_fraction: float = 0.5
    rng_seed: int = 0
    page_width: int = MAX_PAGE_WIDTH
    page_height: int = MAX_PAGE_HEIGHT

    def check(self):
        if self.n_docs < 1:
            raise SynthSpecError("n_docs must be at least 1")
        if not 1 <= self.pages_min <= self.pages_max:
            raise SynthSpecError(f"empty page range {self.pages_min}..{self.pages_max}")
        if self.facts_per_doc < 0:
            raise SynthSpecError("facts_per_doc must not be negative")
        for name in ("multi_hop_fraction", "unanswerable_fraction", "identifier_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SynthSpecError(f"{name} must lie in [0, 1], got {value}")
        if self.multi_hop_fraction + self.unanswerable_fraction > 1.0:
            raise SynthSpecError("multi_hop_fraction + unanswerable_fraction exceeds 1")
        if not (
            1 <= self.page_width <= MAX_PAGE_WIDTH and 1 <= self.page_height <= MAX_PAGE_HEIGHT
        ):
            raise SynthSpecError(f"page size {self.page_width}x{self.page_height} above the cap")

        n_unanswerable, n_multi, n_single = self.slot_counts()
        needed = n_single + 2 * n_multi
        if needed > self.pages_min:
            raise SynthSpecError(
                f"{self.facts_per_doc} facts need {needed} pages, documents may have only {self.pages_min}"
            )

    def slot_counts(self) -> Tuple[int, int, int]:
        """(unanswerable, multi-hop, single-hop) questions per document."""
        n_unanswerable = round(self.facts_per_doc * self.unanswerable_fraction)
        n_multi = min(
            round(self.facts_per_doc * self.multi_hop_fraction),
            self.facts_per_doc - n_unanswerable,
        )
        return n_unanswerable, n_multi, self.facts_per_doc - n_unanswerable - n_multi


class _Names:
    """Unique made-up entity names, shared across the whole corpus."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self.used: set = set()

    def fresh(self) -> str:
        while True:
            name = "".join(self.rng.choice(SYLLABLES) for _ in range(3))
            if name not in self.used:
                self.used.add(name)
                return name


def _value(rng: random.Random, kind: AnswerKind) -> str:
    if kind is AnswerKind.IDENTIFIER:
        letters = "".join(rng.choice("ABCDEFGHJKLMNPQRSTUVWXYZ") for _ in range(2))
        return f"{letters}-{rng.randint(1000, 9999)}"
    return f"{rng.choice(ADJECTIVES)} {rng.choice(NOUNS)}"


def _filler(rng: random.Random) -> List[str]:
    return [
        " ".join(rng.choice(FILLER_WORDS) for _ in range(rng.randint(4, 8)))
        for _ in range(FILLER_LINES_PER_PAGE)
    ]


def _synth_document(
    rng: random.Random, names: _Names, spec: SynthSpec, doc_no: int
) -> Tuple[Document, List[QAItem]]:
    doc_id = f"doc{doc_no:03d}"
    n_pages = rng.randint(spec.pages_min, spec.pages_max)
    n_unanswerable, n_multi, n_single = spec.slot_counts()
    slots = ["single"] * n_single + ["multi"] * n_multi + ["unanswerable"] * n_unanswerable
    rng.shuffle(slots)

    fact_pages = iter(rng.sample(range(1, n_pages + 1), n_single + 2 * n_multi))
    planted: Dict[int, str] = {}
    qa_items = []
    for j, slot in enumerate(slots):
        attribute = rng.choice(ATTRIBUTES)
        qa_id = f"{doc_id}-q{j}"
        if slot == "unanswerable":
            qa_items.append(
                QAItem(
                    qa_id=qa_id,
                    doc_id=doc_id,
                    question=f"What is the {attribute} of {names.fresh()}?",
                    gold_answers=(NOT_ANSWERABLE,),
                    answer_kind=AnswerKind.UNANSWERABLE,
                    evidence_pages=frozenset(),
                )
            )
            continue

        kind = (
            AnswerKind.IDENTIFIER
            if rng.random() < spec.identifier_fraction
            else AnswerKind.FREEFORM
        )
        value = _value(rng, kind)
        keyword = names.fresh()
        if slot == "single":
            page = next(fact_pages)
            planted[page] = f"The {attribute} of {keyword} is {value}."
            question = f"What is the {attribute} of {keyword}?"
            evidence = frozenset({page})
        else:
            link_page, fact_page = next(fact_pages), next(fact_pages)
            unit = names.fresh()
            planted[link_page] = f"{keyword} is managed by {unit}."
            planted[fact_page] = f"The {attribute} of {unit} is {value}."
            question = f"What is the {attribute} of the unit that manages {keyword}?"
            evidence = frozenset({link_page, fact_page})
        qa_items.append(
            QAItem(
                qa_id=qa_id,
                doc_id=doc_id,
                question=question,
                gold_answers=(value,),
                answer_kind=kind,
                evidence_pages=evidence,
            )
        )

    pages = []
    for index in range(1, n_pages + 1):
        lines = _filler(rng)
        if index in planted:
            lines.insert(rng.randrange(len(lines) + 1), planted[index])
        pages.append(
            Page(
                index=index,
                width=spec.page_width,
                height=spec.page_height,
                text=(f"{doc_id} page {index}", *lines),
            )
        )
    return Document(doc_id=doc_id, pages=tuple(pages)), qa_items


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Deterministic corpus with planted facts; every answerable question is solvable
    by reading its evidence pages only."""
    spec.check()
    rng = random.Random(spec.rng_seed)
    names = _Names(rng)

    documents = {}
    qa_items: List[QAItem] = []
    for doc_no in range(spec.n_docs):
        doc, doc_qa = _synth_document(rng, names, spec, doc_no)
        documents[doc.doc_id] = doc
        qa_items.extend(doc_qa)

    corpus = Corpus(documents=documents, qa_items=tuple(qa_items))
    log.info(
        f"synthesized {len(documents)} documents, {corpus.n_pages()} pages, "
        f"{len(qa_items)} qa items (seed {spec.rng_seed})"
    )
    return corpus


def answer_from_text(question: str, lines: Iterable[str]) -> Optional[str]:
    """Resolve a synthetic question by scanning page text. None if the facts are not there."""
    lines = list(lines)

    def lookup(attribute: str, entity: str) -> Optional[str]:
        fact = re.compile(rf"The {re.escape(attribute)} of {re.escape(entity)} is (.+)\.")
        for line in lines:
            if (m := fact.fullmatch(line.strip())) is not None:
                return m.group(1)
        return None

    if (m := TWO_HOP_QUESTION.fullmatch(question.strip())) is not None:
        attribute, keyword = m.groups()
        link = re.compile(rf"{re.escape(keyword)} is managed by (\w+)\.")
        for line in lines:
            if (lm := link.fullmatch(line.strip())) is not None:
                return lookup(attribute, lm.group(1))
        return None

    if (m := SINGLE_HOP_QUESTION.fullmatch(question.strip())) is not None:
        return lookup(*m.groups())
    return None
