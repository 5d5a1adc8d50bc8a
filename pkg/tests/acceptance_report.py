"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

CRITERIA = {
    1: "histogram matches the exhaustive oracle",
    2: "global color calibration statistics",
    3: "DDIM reconstruction and closed form",
    4: "finite-difference gradients",
    5: "block layout and inference policy",
    6: "toy training loss and frozen base",
    7: "held-out color fidelity and disentanglement",
    8: "style luma invariance across workflows",
    9: "content prior round trip and preservation",
    10: "CLI reruns are byte-identical",
}

RESULTS: dict[int, tuple[bool, str]] = {}
SELECTED: set[int] = set()


def report(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}: {detail}")
    return bool(ok)


def summary_lines() -> list[str]:
    lines = []
    for n, name in CRITERIA.items():
        if n not in SELECTED:
            continue
        if n in RESULTS:
            ok, detail = RESULTS[n]
            lines.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        else:
            lines.append(f"criterion {n:2d} FAIL  {name}: no result (the test errored before reporting)")
    return lines
