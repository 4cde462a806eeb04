"""Reserved token ids shared by every vocabulary.

Content tokens start at ``FIRST_CONTENT``; a vocabulary with K content tokens
has size ``K + FIRST_CONTENT``.
"""

PAD = 0
SOS = 1
EOS = 2
BLANK = 3
FIRST_CONTENT = 4
RESERVED = (PAD, SOS, EOS, BLANK)


def vocab_size(n_content: int) -> int:
    return n_content + FIRST_CONTENT


def is_content(tok: int) -> bool:
    return tok >= FIRST_CONTENT


def check_sequence(tokens) -> None:
    """Validate a token sequence: sos only first, no pad before a non-pad."""
    seen_pad = False
    for i, t in enumerate(tokens):
        if t == SOS and i != 0:
            raise ValueError(f"sos at position {i}")
        if t == PAD:
            seen_pad = True
        elif seen_pad:
            raise ValueError(f"non-pad token after padding at position {i}")


def strip(tokens) -> list[int]:
    """Drop sos/eos/pad, leaving content tokens."""
    return [int(t) for t in tokens if t not in (PAD, SOS, EOS)]
