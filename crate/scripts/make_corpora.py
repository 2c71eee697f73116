"""Regenerate the bundled sample corpora under crates/core/data/.

The corpora are synthetic movie-review style sentences. They are small
enough to train on in seconds and carry a learnable but imperfect signal
(label noise and negated phrases), so accuracies land well above chance
without saturating.
"""
import csv
import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "data"

POS = ["good", "great", "wonderful", "moving", "charming", "funny", "smart",
       "brilliant", "beautiful", "delightful", "touching", "gripping",
       "fresh", "witty", "solid", "engaging", "superb", "warm", "clever",
       "memorable"]
NEG = ["bad", "dull", "boring", "awful", "tedious", "clumsy", "flat",
       "lifeless", "stale", "silly", "weak", "messy", "tiresome", "bland",
       "predictable", "shallow", "forgettable", "painful", "lazy",
       "pointless"]
NEUTRAL_ADJ = ["long", "french", "quiet", "loud", "recent", "animated",
               "familiar", "modest", "old", "new"]
SUBJECTS = ["the movie", "this film", "the script", "the cast", "the story",
            "the director", "the ending", "the plot", "the acting",
            "the soundtrack", "the sequel", "the premise", "the dialogue",
            "the pacing", "the lead"]
INTENS = ["", "", "very", "truly", "rather", "so", "quite", "remarkably"]
FILLERS = ["", "", "from start to finish", "for most of its running time",
           "in the second half", "despite the hype", "on the whole",
           "at times", "and the audience knows it", "by any measure"]
CONNECT = ["and", "but also", "and yet", "while"]


def phrase(rng, polarity):
    words = POS if polarity == 1 else NEG
    negate = rng.random() < 0.12
    if negate:
        words = NEG if polarity == 1 else POS
    adj = rng.choice(words)
    inten = rng.choice(INTENS)
    core = f"{inten} {adj}".strip()
    if negate:
        core = f"not {core}"
    return core


def sentence(rng, polarity):
    subj = rng.choice(SUBJECTS)
    verb = rng.choice(["is", "was", "feels", "seems"])
    parts = [subj, verb, phrase(rng, polarity)]
    r = rng.random()
    if r < 0.35:
        parts += [rng.choice(CONNECT), phrase(rng, polarity)]
    elif r < 0.55:
        parts += ["and", rng.choice(NEUTRAL_ADJ)]
    filler = rng.choice(FILLERS)
    if filler:
        parts.append(filler)
    text = " ".join(p for p in parts if p)
    text += rng.choice([".", ".", "!", " ...", ""])
    return text[0].upper() + text[1:]


def binary(rng, n, noise):
    rows = []
    for i in range(n):
        pol = i % 2
        text = sentence(rng, pol)
        label = pol if rng.random() >= noise else 1 - pol
        rows.append((text, "pos" if label == 1 else "neg"))
    rng.shuffle(rows)
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["text", "label"])
        w.writerows(rows)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    write_csv(OUT / "rtr_style.csv", binary(random.Random(20240101), 2000, 0.05))
    write_csv(OUT / "toy_sentiment.csv", binary(random.Random(7), 240, 0.0))
    write_csv(OUT / "toy32.csv", binary(random.Random(32), 32, 0.0))

    rng = random.Random(3)
    with open(OUT / "three_class.jsonl", "w", encoding="utf-8") as f:
        for i in range(90):
            cls = i % 3
            if cls == 1:
                text = f"{rng.choice(SUBJECTS)} was {rng.choice(NEUTRAL_ADJ)} {rng.choice(FILLERS)}".strip()
                label = "neutral"
            else:
                text = sentence(rng, 1 if cls == 2 else 0)
                label = "positive" if cls == 2 else "negative"
            f.write(json.dumps({"text": text, "label": label}) + "\n")


if __name__ == "__main__":
    main()
