"""Regenerate the bundled corpus (src/specprune/assets/tinytext.txt).

Emits ~1 MB of deterministic pseudo-English prose from a fixed seed: a
small vocabulary and a handful of sentence templates, so a byte-level
model can learn real structure quickly.  Rerunning this script always
reproduces the checked-in file byte for byte.
"""

import os
import random

SEED = 20240601
TARGET_BYTES = 1_000_000

DETERMINERS = ["the", "the", "the", "a", "this", "that", "every", "one"]

ADJECTIVES = [
    "old", "small", "quiet", "bright", "grey", "warm", "cold", "narrow",
    "green", "heavy", "gentle", "pale", "dark", "soft", "long", "round",
    "clever", "tired", "young", "wide", "low", "tall", "thin", "broad",
    "silver", "golden", "wooden", "stone", "distant", "early", "late", "plain",
]

NOUNS = [
    "river", "garden", "lantern", "miller", "road", "bridge", "house", "field",
    "window", "door", "tree", "bird", "stone", "path", "hill", "valley",
    "morning", "evening", "market", "village", "forest", "meadow", "boat",
    "letter", "table", "chair", "clock", "candle", "basket", "well", "gate",
    "wall", "roof", "cellar", "kitchen", "orchard", "harvest", "winter",
    "summer", "rain", "wind", "snow", "fire", "shadow", "light", "voice",
    "song", "story", "neighbor", "child", "farmer", "teacher", "baker",
    "carpenter", "fisherman", "traveler", "stranger", "friend", "brother",
    "sister", "mother", "father", "horse", "dog", "cat", "sheep", "goat",
    "wagon", "barrel", "rope", "ladder", "hammer", "kettle", "loaf", "apple",
    "pear", "plum", "wheat", "barley", "mill", "pond", "stream", "shore",
]

VERB_TRANS = [
    "carried", "found", "watched", "opened", "closed", "followed", "crossed",
    "built", "mended", "painted", "filled", "emptied", "gathered", "counted",
    "remembered", "forgot", "brought", "lifted", "touched", "held", "sold",
    "bought", "borrowed", "returned", "cleaned", "covered", "shared",
]

VERB_INTRANS = [
    "waited", "slept", "rested", "walked", "wandered", "returned", "arrived",
    "departed", "listened", "smiled", "laughed", "sang", "worked", "stood",
    "sat", "stumbled", "hurried", "paused", "dreamed", "whistled",
]

ADVERBS = [
    "slowly", "quietly", "carefully", "suddenly", "gladly", "often",
    "rarely", "together", "alone", "again", "early", "late", "soon",
    "patiently", "gently",
]

PREPOSITIONS = [
    "over", "under", "near", "beside", "through", "behind", "across",
    "along", "beyond", "around", "toward", "past",
]

TIME_PHRASES = [
    "In the morning", "At dusk", "After the rain", "Before the harvest",
    "That winter", "One summer evening", "By midday", "At first light",
    "After supper", "During the storm", "Years ago", "The next day",
]


def noun_phrase(rng):
    det = rng.choice(DETERMINERS)
    if rng.random() < 0.45:
        return f"{det} {rng.choice(ADJECTIVES)} {rng.choice(NOUNS)}"
    return f"{det} {rng.choice(NOUNS)}"


def clause(rng):
    roll = rng.random()
    if roll < 0.40:
        return f"{noun_phrase(rng)} {rng.choice(VERB_TRANS)} {noun_phrase(rng)}"
    if roll < 0.70:
        return (
            f"{noun_phrase(rng)} {rng.choice(VERB_INTRANS)} "
            f"{rng.choice(PREPOSITIONS)} {noun_phrase(rng)}"
        )
    if roll < 0.90:
        return f"{noun_phrase(rng)} {rng.choice(VERB_INTRANS)} {rng.choice(ADVERBS)}"
    return (
        f"{noun_phrase(rng)} {rng.choice(VERB_TRANS)} {noun_phrase(rng)} "
        f"{rng.choice(PREPOSITIONS)} {noun_phrase(rng)}"
    )


def sentence(rng):
    parts = [clause(rng)]
    while rng.random() < 0.25 and len(parts) < 3:
        parts.append(rng.choice(["and", "but", "so"]) + " " + clause(rng))
    text = ", ".join(parts)
    if rng.random() < 0.15:
        text = rng.choice(TIME_PHRASES).lower() + " " + text
    return text[0].upper() + text[1:] + "."


def paragraph(rng):
    return " ".join(sentence(rng) for _ in range(rng.randint(3, 7)))


def main():
    rng = random.Random(SEED)
    chunks = []
    size = 0
    while size < TARGET_BYTES:
        p = paragraph(rng) + "\n\n"
        chunks.append(p)
        size += len(p.encode())
    text = "".join(chunks)
    out = os.path.join(
        os.path.dirname(__file__), "..", "src", "specprune", "assets", "tinytext.txt"
    )
    out = os.path.normpath(out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    print(f"wrote {len(text.encode())} bytes to {out}")


if __name__ == "__main__":
    main()
