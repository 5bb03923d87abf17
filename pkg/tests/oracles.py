"""Brute-force references the streaming code is checked against."""


def is_subsequence(needle, hay) -> bool:
    it = iter(hay)
    return all(any(x == y for y in it) for x in needle)


def detection_oracle(sequences, thetas, stream):
    """Per stream position, the ids whose first theta hashes form a
    subsequence of the stream consumed since that id's last detection."""
    since = {sid: 0 for sid in sequences}
    out = []
    for t in range(len(stream)):
        hits = [sid for sid, seq in sequences.items()
                if is_subsequence(seq[:thetas[sid]], stream[since[sid]:t + 1])]
        for sid in hits:
            since[sid] = t + 1
        out.append(sorted(hits))
    return out


def prefix_pairs_oracle(sequences, thetas, stream):
    """Per position, the (id, j) pairs held when every occurrence of a
    sequence's first hash starts its own run and runs advance on a match.
    Duplicate runs are kept as a list and only collapsed at the end."""
    runs = {sid: [] for sid in sequences}
    states = []
    for h in stream:
        for sid, seq in sequences.items():
            moved = [j + 1 if seq[j] == h else j for j in runs[sid]]
            if seq[0] == h:
                moved.append(1)
            runs[sid] = [] if thetas[sid] in moved else moved
        states.append({(sid, j) for sid, js in runs.items() for j in js})
    return states
