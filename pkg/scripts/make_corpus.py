"""Generate the bundled synthetic corpus (src/fedshield/data/corpus.txt).

The text is produced from a small hand-written phrase grammar so that the
repository is self-contained; the output is dedicated to the public domain
(CC0). Re-running with the default seed reproduces the file byte for byte.
"""

import argparse
import random
from pathlib import Path

NOUNS = ["cat", "dog", "car", "house", "book", "phone", "game", "movie", "song",
         "team", "city", "friend", "teacher", "doctor", "garden", "window",
         "coffee", "dinner", "letter", "ticket", "bike", "river", "storm", "key"]
ADJS = ["big", "small", "new", "old", "red", "quiet", "happy", "late", "green",
        "cold", "bright", "strange"]
VERBS_PAST = ["saw", "found", "liked", "lost", "fixed", "bought", "opened",
              "watched", "cleaned", "painted"]
VERBS_BASE = ["see", "find", "call", "meet", "watch", "fix", "buy", "visit",
              "cook", "read"]
PLACES = ["park", "store", "office", "beach", "station", "library", "gym",
          "school", "market", "airport"]
TIMES = ["today", "tomorrow", "tonight", "later", "soon", "this morning",
         "next week", "on friday", "after work"]
NAMES = ["anna", "ben", "carlos", "dana", "eli", "fatima", "george", "hana",
         "ivan", "julia"]
EVENTS = ["meeting", "party", "game", "show", "class", "concert", "flight"]
PREPS = ["in", "on", "near", "behind", "under"]


def zipf_choice(rng, words):
    weights = [1.0 / (i + 1) for i in range(len(words))]
    return rng.choices(words, weights=weights, k=1)[0]


def sentence(rng):
    n = lambda: zipf_choice(rng, NOUNS)  # noqa: E731
    a = lambda: zipf_choice(rng, ADJS)  # noqa: E731
    t = lambda: zipf_choice(rng, TIMES)  # noqa: E731
    templates = [
        lambda: f"the {a()} {n()} {zipf_choice(rng, VERBS_PAST)} {zipf_choice(rng, PREPS)} the {n()}",
        lambda: f"the {n()} is {zipf_choice(rng, PREPS)} the {n()}",
        lambda: f"i {zipf_choice(rng, VERBS_PAST)} the {a()} {n()} {t()}",
        lambda: f"{zipf_choice(rng, NAMES)} went to the {zipf_choice(rng, PLACES)} {t()}",
        lambda: f"we will {zipf_choice(rng, VERBS_BASE)} the {n()} {t()}",
        lambda: f"do you want to {zipf_choice(rng, VERBS_BASE)} the {n()} {t()}",
        lambda: f"i am going to the {zipf_choice(rng, PLACES)} {t()}",
        lambda: f"see you at the {zipf_choice(rng, PLACES)} {t()}",
        lambda: f"thank you for the {a()} {n()}",
        lambda: f"what time is the {zipf_choice(rng, EVENTS)} {t()}",
        lambda: f"how are you {t()}",
        lambda: f"can you {zipf_choice(rng, VERBS_BASE)} {zipf_choice(rng, NAMES)} at the {zipf_choice(rng, PLACES)}",
        lambda: f"my {n()} is {a()} and {a()}",
    ]
    weights = [6, 4, 5, 4, 4, 3, 4, 3, 3, 3, 2, 2, 2]
    return rng.choices(templates, weights=weights, k=1)[0]()


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--tokens", type=int, default=100_000)
    parser.add_argument("--seed", type=int, default=20230701)
    parser.add_argument("--out", type=Path,
                        default=Path(__file__).resolve().parents[1] / "src/fedshield/data/corpus.txt")
    args = parser.parse_args()
    rng = random.Random(args.seed)
    lines, count = [], 0
    while count < args.tokens:
        s = sentence(rng)
        lines.append(s)
        count += len(s.split())
    args.out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(lines)} sentences, {count} tokens to {args.out}")


if __name__ == "__main__":
    main()
