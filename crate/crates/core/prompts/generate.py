"""Writes the golden prompt files. Run from this directory: python3 generate.py

Each file holds one rendered prompt, byte-exact, with no trailing newline.
"""

INT_SCI = [
    "Q: Which is larger, 9.9 × 10^2 or 100? A: 9.9 × 10^2",
    "Q: Which is larger, 161230 or 7.182 × 10^5? A: 7.182 × 10^5",
    "Q: Which is larger, 713 or 4.78 × 10^2? A: 713",
    "Q: Which is larger, 1.354 × 10^6 or 4906723? A: 4906723",
    "Q: Which is larger, 20834 or 6.5 × 10^3? A: 20834",
]
DEC_SCI_FIRST = "Q: Which is larger, 9.9 × 10^2 or 899.9? A: 9.9 × 10^2"
SWAPPED = {
    INT_SCI[0]: "Q: Which is larger, 100 or 9.9 × 10^2? A: 9.9 × 10^2",
    DEC_SCI_FIRST: "Q: Which is larger, 899.9 or 9.9 × 10^2? A: 9.9 × 10^2",
}
PAIRS = {"int-sci": ("570", "5.8 × 10^2"), "dec-sci": ("57.25", "5.8 × 10^1")}


def question(a, b):
    return f"Q: Which is larger, {a} or {b}? A:"


def demos(variant, k, swapped):
    lines = list(INT_SCI[:k])
    if variant == "dec-sci":
        lines[0] = DEC_SCI_FIRST
    if swapped:
        lines[0] = SWAPPED[lines[0]]
    return lines


def main():
    for variant, (a, b) in PAIRS.items():
        files = {f"{variant}_zero_shot.txt": question(a, b)}
        for k in range(1, 6):
            files[f"{variant}_{k}_shot.txt"] = "\n".join(demos(variant, k, False) + [question(a, b)])
        files[f"{variant}_1_shot_swapped.txt"] = "\n".join(demos(variant, 1, True) + [question(a, b)])
        for name, text in files.items():
            with open(name, "w", encoding="utf-8", newline="") as f:
                f.write(text)


if __name__ == "__main__":
    main()
