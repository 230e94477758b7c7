"""Dataset manifests: one image path per line, ids parsed from the filename.

A manifest line is ``relative/or/absolute/path.png`` optionally followed
by a tab and a language tag. Writer and document ids come from the file
stem via a pattern such as ``{writer}_{doc}`` (the ICDAR13/CVL naming);
every literal character in the pattern must match exactly.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

_PLACEHOLDERS = {"writer": "writer_id", "doc": "doc_id", "lang": "language"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class DocumentEntry:
    path: Path
    writer_id: str
    doc_id: str
    language: str = ""

    @property
    def key(self) -> str:
        """Corpus-unique document key; doc_id alone may repeat across writers."""
        return f"{self.writer_id}_{self.doc_id}"


def compile_id_pattern(pattern: str) -> re.Pattern:
    """Translate ``{writer}_{doc}`` style patterns into an anchored regex."""
    out = []
    pos = 0
    seen = set()
    for m in re.finditer(r"\{(\w+)\}", pattern):
        name = m.group(1)
        if name not in _PLACEHOLDERS:
            raise ManifestError(f"unknown placeholder {{{name}}} in id pattern {pattern!r}")
        if name in seen:
            raise ManifestError(f"duplicate placeholder {{{name}}} in id pattern {pattern!r}")
        seen.add(name)
        out.append(re.escape(pattern[pos : m.start()]))
        out.append(f"(?P<{name}>.+?)")
        pos = m.end()
    out.append(re.escape(pattern[pos:]))
    if not {"writer", "doc"} <= seen:
        raise ManifestError(f"id pattern {pattern!r} must contain {{writer}} and {{doc}}")
    return re.compile("".join(out))


def parse_manifest(path: str | Path, id_pattern: str = "{writer}_{doc}") -> list[DocumentEntry]:
    """Read a manifest file into document entries.

    Paths are resolved relative to the manifest's directory. Duplicate
    (writer, doc) pairs and lines whose stem does not match the pattern
    are rejected with the offending line number.
    """
    path = Path(path)
    regex = compile_id_pattern(id_pattern)
    entries: list[DocumentEntry] = []
    seen: dict[tuple[str, str], int] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) > 2:
            raise ManifestError(f"{path}:{lineno}: expected 'path[<TAB>language]', got {raw!r}")
        img = Path(fields[0])
        if not img.is_absolute():
            img = path.parent / img
        language = fields[1].strip() if len(fields) == 2 else ""
        m = regex.fullmatch(img.stem)
        if m is None:
            raise ManifestError(
                f"{path}:{lineno}: filename {img.stem!r} does not match id pattern"
            )
        entry = DocumentEntry(
            path=img,
            writer_id=m.group("writer"),
            doc_id=m.group("doc"),
            language=m.groupdict().get("lang") or language,
        )
        pair = (entry.writer_id, entry.doc_id)
        if pair in seen:
            raise ManifestError(
                f"{path}:{lineno}: duplicate document {entry.key} (first at line {seen[pair]})"
            )
        seen[pair] = lineno
        entries.append(entry)
    if not entries:
        logger.warning("manifest %s is empty", path)
    return entries
