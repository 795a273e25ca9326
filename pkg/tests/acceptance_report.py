"""Shared pass/fail table for the acceptance criteria."""

CRITERIA = {
    1: "gradient suite",
    2: "Monte Carlo correctness",
    3: "Lambert shading identity",
    4: "Binary Concrete contract",
    5: "oracle agreement",
    6: "static/dynamic separation",
    7: "ablation ordering",
    8: "relight consistency and linearity",
    9: "envmap recovery",
    10: "determinism",
}

RESULTS: dict[int, tuple[bool, str]] = {}


def summary_lines() -> list[str]:
    out = []
    for n, name in CRITERIA.items():
        if n not in RESULTS:
            continue
        ok, detail = RESULTS[n]
        out.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return out
