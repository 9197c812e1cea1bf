"""Naive reference implementations used as test oracles.

They work from a step-by-step timeline and an onset mask rather than the
note list, and share no code with the package.
"""

UNITS = {"full": 96, "half": 48, "quarter": 24, "8th": 12, "16th": 6,
         "dot-half": 72, "dot-quarter": 36, "dot-8th": 18, "dot-16th": 9,
         "half-triplet": 32, "quarter-triplet": 16, "8th-triplet": 8}
ORDER = list(UNITS)


def timeline(phrase):
    pitch = [None] * 64
    onset = [False] * 64
    for n in phrase.notes:
        onset[n.start] = True
        for s in range(n.start, n.start + n.duration):
            pitch[s] = n.pitch
    return pitch, onset


def nearest_class(steps):
    units = steps * 6
    best = None
    for i, name in enumerate(ORDER):
        key = (abs(UNITS[name] - units), UNITS[name])
        if best is None or key < best[0]:
            best = (key, i)
    return best[1]


def events(phrase, rests):
    """(is_rest, n_steps, pitch) runs in time order."""
    pitch, onset = timeline(phrase)
    out = []
    s = 0
    while s < 64:
        if pitch[s] is None:
            e = s
            while e < 64 and pitch[e] is None:
                e += 1
            if rests:
                out.append((True, e - s, None))
        else:
            e = s + 1
            while e < 64 and pitch[e] == pitch[s] and not onset[e]:
                e += 1
            out.append((False, e - s, pitch[s]))
        s = e
    return out


def features(phrase, rests=False):
    pitch, onset = timeline(phrase)
    sounding = [p for p in pitch if p is not None]
    notes = [ev for ev in events(phrase, False)]
    pcs = [p % 12 for _, _, p in notes]
    f = {}
    f["PC"] = len(set(sounding))
    f["PC/bar"] = sum(len({p for p in pitch[b * 16:(b + 1) * 16] if p is not None}) for b in range(4)) / 4
    f["PR"] = (max(sounding) - min(sounding)) if sounding else 0
    f["PCH"] = [pcs.count(k) for k in range(12)]
    m = [[0] * 12 for _ in range(12)]
    for a, b in zip(pcs, pcs[1:]):
        m[a][b] += 1
    f["PCTM"] = m
    f["NC"] = sum(onset)
    f["NC/bar"] = sum(sum(onset[b * 16:(b + 1) * 16]) for b in range(4)) / 4
    size = 24 if rests else 12
    seq = [nearest_class(n) + (12 if is_rest else 0) for is_rest, n, _ in events(phrase, rests)]
    f["NLH"] = [seq.count(k) for k in range(size)]
    t = [[0] * size for _ in range(size)]
    for a, b in zip(seq, seq[1:]):
        t[a][b] += 1
    f["NLTM"] = t
    return f
