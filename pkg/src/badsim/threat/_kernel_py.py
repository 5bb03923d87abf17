"""Pure-Python partial-sequence kernel (fallback for the compiled one).

Entry bit ``j - 1`` of ``entries[s]`` is set when the partial sequence
``(s, j)`` is held. ``pos_mask`` bit ``p`` is set when the current hash sits
at 0-based position ``p`` of sequence ``s``.
"""


def advance(entries, row_start, row_stop, seq_idx, pos_mask, touched, formed):
    """Apply one hash to every sequence listed in rows [row_start, row_stop).

    Returns ``(work, n_touched)``; the first ``n_touched`` slots of
    ``touched``/``formed`` receive the sequence index and the bits of the
    partial sequences formed by this step.
    """
    work = 0
    n = 0
    for r in range(row_start, row_stop):
        s = seq_idx[r]
        pm = pos_mask[r]
        e = entries[s]
        ext = e & (pm >> 1)
        ins = pm & 1
        new_bits = (ext << 1) | ins
        entries[s] = (e & ~ext) | new_bits
        work += bin(ext).count("1") + ins
        if new_bits:
            touched[n] = s
            formed[n] = new_bits
            n += 1
    return work, n
