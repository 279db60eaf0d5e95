"""Label space: diagnosis chapters, the top-k code list, and the code-to-chapter map.

The default grouping folds the ICD-9 numeric chapters plus the V/E
supplementary sections into 16 therapy-area chapters; it ships as a JSON
asset so deployments can substitute their own grouping.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import CodeFormatError, ConfigError, UnmappedCodeError
from .util import canonical_json, sha256_hex

_CODE_RE = re.compile(r"^(\d{3}|V\d{2}|E\d{3})(?:\.(\d{1,2}))?$")


def code_root(code: str) -> str:
    """Return the chapter-relevant root of an ICD-9 code string.

    Numeric codes root to their first three digits, V codes to ``Vnn`` and
    E codes to ``Ennn``.  Raises CodeFormatError on anything else.
    """
    m = _CODE_RE.match(code.strip())
    if m is None:
        raise CodeFormatError(f"not a valid ICD-9 code: {code!r}")
    return m.group(1)


def _root_sort_key(root: str) -> tuple[int, int]:
    # numeric roots < V roots < E roots, each ordered by value
    if root[0] == "V":
        return (1, int(root[1:]))
    if root[0] == "E":
        return (2, int(root[1:]))
    return (0, int(root))


def _root_in_range(root: str, lo: str, hi: str) -> bool:
    if root[0].isdigit() != lo[0].isdigit() or (not root[0].isdigit() and root[0] != lo[0]):
        return False
    return _root_sort_key(lo) <= _root_sort_key(root) <= _root_sort_key(hi)


@dataclass(frozen=True)
class Chapter:
    id: int
    name: str
    ranges: tuple[tuple[str, str], ...]

    def contains(self, root: str) -> bool:
        return any(_root_in_range(root, lo, hi) for lo, hi in self.ranges)


@dataclass(frozen=True)
class CodeLabel:
    code: str
    description: str
    chapter_id: int


class LabelSpace:
    """16 chapters + an ordered code list; immutable once constructed."""

    def __init__(self, chapters: list[Chapter], codes: list[CodeLabel]):
        if [c.id for c in chapters] != list(range(len(chapters))):
            raise ConfigError("chapter ids must be 0..n-1 in order")
        self.chapters = tuple(chapters)
        self.codes = tuple(codes)
        seen = set()
        for cl in codes:
            if cl.code in seen:
                raise ConfigError(f"duplicate code in label space: {cl.code}")
            seen.add(cl.code)
            if not 0 <= cl.chapter_id < len(chapters):
                raise ConfigError(f"code {cl.code} maps to unknown chapter {cl.chapter_id}")
        self.code_to_chapter = {cl.code: cl.chapter_id for cl in codes}
        self.code_index = {cl.code: i for i, cl in enumerate(codes)}

    @property
    def n_chapters(self) -> int:
        return len(self.chapters)

    @property
    def n_codes(self) -> int:
        return len(self.codes)

    @property
    def n_labels(self) -> int:
        return self.n_chapters + self.n_codes

    def codes_in_chapter(self, chapter_id: int) -> list[int]:
        """Code label indices belonging to one chapter, in label order."""
        return [i for i, cl in enumerate(self.codes) if cl.chapter_id == chapter_id]

    def fingerprint(self) -> str:
        """Stable digest of the full label configuration."""
        payload = canonical_json(self.to_dict())
        return sha256_hex(payload.encode("utf-8"))[:16]

    def to_dict(self) -> dict:
        return {
            "chapters": [
                {"id": ch.id, "name": ch.name, "ranges": [list(r) for r in ch.ranges]}
                for ch in self.chapters
            ],
            "codes": [
                {"code": cl.code, "description": cl.description, "chapter_id": cl.chapter_id}
                for cl in self.codes
            ],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LabelSpace":
        chapters = [
            Chapter(
                id=int(ch["id"]),
                name=ch["name"],
                ranges=tuple((lo, hi) for lo, hi in ch["ranges"]),
            )
            for ch in obj["chapters"]
        ]
        codes = [
            CodeLabel(cl["code"], cl.get("description", ""), int(cl["chapter_id"]))
            for cl in obj.get("codes", [])
        ]
        return cls(chapters, codes)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "LabelSpace":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_chapters() -> list[Chapter]:
    path = Path(__file__).parent / "data" / "chapters.json"
    obj = json.loads(path.read_text(encoding="utf-8"))
    return [
        Chapter(
            id=int(ch["id"]),
            name=ch["name"],
            ranges=tuple((lo, hi) for lo, hi in ch["ranges"]),
        )
        for ch in obj["chapters"]
    ]


def map_code_to_chapter(code: str, space: "LabelSpace | list[Chapter]") -> int:
    """Chapter id whose range set contains the code's root.

    Raises CodeFormatError for malformed codes, UnmappedCodeError when the
    root falls outside every configured range.
    """
    chapters = space.chapters if isinstance(space, LabelSpace) else space
    root = code_root(code)
    for ch in chapters:
        if ch.contains(root):
            return ch.id
    raise UnmappedCodeError(f"code {code!r} (root {root}) not covered by any chapter")


def select_top_codes(code_counts: dict[str, int], k: int) -> list[str]:
    """The k most frequent codes, ties broken by ascending code string."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    ranked = sorted(code_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [code for code, _ in ranked[:k]]


def build_label_space(
    code_counts: dict[str, int],
    k: int = 50,
    chapters: list[Chapter] | None = None,
    descriptions: dict[str, str] | None = None,
) -> LabelSpace:
    """Label space over the top-k corpus codes under the given chapter table."""
    chapters = chapters if chapters is not None else default_chapters()
    descriptions = descriptions or {}
    top = select_top_codes(code_counts, k)
    codes = [
        CodeLabel(
            code=c,
            description=descriptions.get(c, f"ICD-9 {c}"),
            chapter_id=map_code_to_chapter(c, chapters),
        )
        for c in top
    ]
    return LabelSpace(chapters, codes)
