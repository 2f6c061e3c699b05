#!/usr/bin/env python3
"""Generate the shipped word-problem corpus (data/train.txt, data/eval.txt).

Each line is one document: a short arithmetic question followed by an answer
that restates the question before solving it. The restatement makes the
continuation copy-heavy, which is what prompt-matching drafters exploit.
"""
import argparse
import pathlib
import random

NAMES = ["Sara", "Tom", "Maya", "Ben", "Lena", "Omar", "Ivy", "Jack", "Nora",
         "Leo", "Ruth", "Sam", "Aria", "Hugo", "Zoe", "Eli", "Mia", "Owen",
         "Nina", "Paul", "Rosa", "Adam", "Lucy", "Max", "Tara", "Ian", "Emma",
         "Kai", "June", "Noah"]
ITEMS = ["apples", "pencils", "marbles", "stickers", "books", "cookies",
         "cards", "shells", "coins", "stamps", "flowers", "candles", "cups",
         "boxes", "balloons", "buttons", "crayons", "eggs", "oranges", "rocks"]
PLACES = ["store", "market", "fair", "library", "garden", "school", "park",
          "bakery", "beach", "museum"]


def doc(rng: random.Random) -> str:
    a, b = rng.sample(NAMES, 2)
    item = rng.choice(ITEMS)
    place = rng.choice(PLACES)
    kind = rng.randrange(5)
    if kind == 0:
        x, y = rng.randint(2, 40), rng.randint(2, 30)
        q = f"{a} has {x} {item}. {a} buys {y} more {item} at the {place}. How many {item} does {a} have now?"
        s = f"{a} has {x} {item}. {a} buys {y} more {item} at the {place}. So {a} has {x} + {y} = {x + y} {item} now."
        ans = x + y
    elif kind == 1:
        x = rng.randint(10, 60)
        y = rng.randint(1, x - 1)
        q = f"{a} has {x} {item}. {a} gives {y} {item} to {b}. How many {item} does {a} have left?"
        s = f"{a} has {x} {item}. {a} gives {y} {item} to {b}. So {a} has {x} - {y} = {x - y} {item} left."
        ans = x - y
    elif kind == 2:
        x, y = rng.randint(2, 12), rng.randint(2, 12)
        q = f"There are {x} boxes at the {place}. Each box has {y} {item}. How many {item} are there in total?"
        s = f"There are {x} boxes at the {place}. Each box has {y} {item}. So there are {x} * {y} = {x * y} {item} in total."
        ans = x * y
    elif kind == 3:
        y = rng.randint(2, 9)
        ans = rng.randint(2, 12)
        x = y * ans
        q = f"{a} shares {x} {item} equally with {y} friends at the {place}. How many {item} does each friend get?"
        s = f"{a} shares {x} {item} equally with {y} friends at the {place}. So each friend gets {x} / {y} = {ans} {item}."
    else:
        x, y = rng.randint(2, 30), rng.randint(2, 30)
        q = f"{a} has {x} {item} and {b} has {y} {item}. How many {item} do {a} and {b} have together?"
        s = f"{a} has {x} {item} and {b} has {y} {item}. So {a} and {b} have {x} + {y} = {x + y} {item} together."
        ans = x + y
    return f"Q: {q} A: {s} The answer is {ans}."


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data"))
    ap.add_argument("--train", type=int, default=2500)
    ap.add_argument("--eval", type=int, default=200)
    ap.add_argument("--seed", type=int, default=20240117)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.txt").write_text("\n".join(doc(rng) for _ in range(args.train)) + "\n")
    (out / "eval.txt").write_text("\n".join(doc(rng) for _ in range(args.eval)) + "\n")


if __name__ == "__main__":
    main()
