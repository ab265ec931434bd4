"""Generate the bundled training corpus: deterministic template-grammar
English-ish prose with a closed vocabulary, blank lines between documents.

The point is not literary merit. The text has enough local structure
(determiner-adjective-noun order, verb forms, recurring subjects inside a
document) that a small causal LM beats the unigram baseline by a wide margin,
while staying fully reproducible and free of licensing questions.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

NAMES = """ada alan alice amara amir anna arthur asha ben bruno carla carlos chen
clara cora daniel dara david diego edith elena eli emma erik farah felix fiona
franz greta hana hassan hugo ida igor ines ivan jonas julia kai karim kira lars
lea leila liam lin lucia luis maja marco maria mateo maya mira noor omar otto
paula pavel petra priya rafael rosa samir sara stefan tamar tessa theo uma vera
victor wanda yara yusuf zara zoe""".split()

PLACES = """archive attic bakery barn bridge canal cellar chapel cliff courtyard
dock farm ferry forge fountain garden granary greenhouse harbor inn island
kitchen library lighthouse lodge market meadow mill mine monastery observatory
orchard pier plaza pond quarry ridge river square stable station summit tavern
terrace tower trail valley village vineyard well workshop""".split()

NOUNS = """anchor apple atlas axe badge banner barrel basket beacon bell bench
blade blanket boat book boot bottle bowl box bread brick broom brush bucket
bundle button cable candle canvas cart chain chair chalk chart chest chisel
clock cloak cloth coal coin collar comb compass cord cork crate crow crumb cup
curtain dial diary dough drum easel engine fabric feather fence fiddle flag
flask flour flute fork frame gate gear glass glove grain hammer handle harness
hat hinge hook horn jar jug kettle key kite knife knot ladder lamp lantern
latch leaf ledger lens letter lever lid lock loom magnet mallet map marble mask
mast mat mirror mug nail needle net notebook oar orb oven paddle pail paint
pan paper parcel peg pen pencil pipe pitcher plank plate plow pocket pole post
pot pouch pulley pump quill rack raft rail rake reel ribbon ring rivet robe
rope rudder rug ruler sack saddle sail salt satchel saw scale scarf screw seal
seed shawl shears shelf shell shingle shovel shutter sickle sieve sign silk
sled sleeve spade spark spindle sponge spool spoon stamp stool stove strap
string switch table tarp thread tile timber tin tongs tool torch tray trunk
tub twine valve vase veil vest wagon wand wax wedge wheel whistle wick wire
wool wreath yarn yoke""".split()

# regular verbs only, so base+s / base+ed / base+ing are all well formed
VERBS = """admire arrange assemble balance borrow brush carry carve check clean
collect compare cook copy count cover deliver describe design discover drag
dust empty examine fasten fetch fill finish fix fold follow gather grease
guard hammer haul inspect label lift load lock mark measure mend mix mount
notice offer open order pack paint paper patch pile pitch place plant polish
position pour practice prepare press pull push question raise reach record
remember remove repair return roll rub scrub seal search settle sharpen shift
show sketch smooth sort stack stamp start stitch store study tally test tidy
tighten trace track trade trim tune turn unload unpack visit wash watch wax
weigh wind wipe wrap""".split()

ADJECTIVES = """amber ancient bent blue bright brittle broad bronze brown calm
careful cheap chipped clean clever coarse cold copper cracked crisp crooked
curious damp dark deep dense dim dry dull dusty faded faint fine firm flat
fragile fresh gentle glad gold gray green heavy hollow honest humble iron keen
large late lean light little lively long loose loud low mild narrow neat new
odd old pale patient plain polished proud quick quiet rare red rough round
rusty sharp shiny short silent silver simple sleek slender slow small smooth
soft solid sour spare stale steady steep sticky stiff straight strange strong
sturdy sweet tall tame thick thin tidy tight tiny tired warm weak wet white
wide wild wise wooden worn yellow young""".split()

ADVERBS = """again alone already always barely briskly calmly carefully
cheerfully early eagerly easily evenly finally firmly gently gladly gradually
halfway happily hardly instead lately lightly loudly neatly nearly often once
patiently politely promptly quickly quietly rarely sadly secretly slowly soon
steadily still swiftly then there today together tomorrow twice usually
yesterday""".split()

TIME_PHRASES = [
    "in the morning", "after lunch", "before dawn", "at dusk", "by noon",
    "in the evening", "after the rain", "during the festival", "all afternoon",
    "at first light", "before supper", "on market day", "after the storm",
    "through the winter", "in early spring",
]


def _verb(rng, form: str) -> str:
    v = VERBS[rng.integers(len(VERBS))]
    if form == "past":
        return v + "d" if v.endswith("e") else v + "ed"
    if form == "ing":
        return v[:-1] + "ing" if v.endswith("e") else v + "ing"
    if form == "s":
        return v + "es" if v.endswith(("s", "sh", "ch", "x")) else v + "s"
    return v


def _noun(rng, plural=False) -> str:
    n = NOUNS[rng.integers(len(NOUNS))]
    if plural:
        return n + "es" if n.endswith(("s", "sh", "ch", "x")) else n + "s"
    return n


def _np(rng) -> str:
    roll = rng.integers(10)
    if roll < 4:
        return f"the {ADJECTIVES[rng.integers(len(ADJECTIVES))]} {_noun(rng)}"
    if roll < 7:
        return f"the {_noun(rng)}"
    if roll < 8:
        return f"a {_noun(rng)}"
    if roll < 9:
        return f"the {_noun(rng, plural=True)}"
    return f"{NAMES[rng.integers(len(NAMES))]}"


def _place(rng) -> str:
    return f"the {PLACES[rng.integers(len(PLACES))]}"


def _sentence(rng, subject: str) -> str:
    kind = rng.integers(8)
    if kind == 0:
        return (f"{subject} {_verb(rng, 'past')} {_np(rng)} "
                f"near {_place(rng)} .")
    if kind == 1:
        return (f"{subject} {ADVERBS[rng.integers(len(ADVERBS))]} "
                f"{_verb(rng, 'past')} the {_noun(rng)} .")
    if kind == 2:
        return (f"the {_noun(rng)} in {_place(rng)} was "
                f"{ADJECTIVES[rng.integers(len(ADJECTIVES))]} and "
                f"{ADJECTIVES[rng.integers(len(ADJECTIVES))]} .")
    if kind == 3:
        return (f"{TIME_PHRASES[rng.integers(len(TIME_PHRASES))]} , {subject} "
                f"{_verb(rng, 'past')} the {_noun(rng, plural=True)} "
                f"behind {_place(rng)} .")
    if kind == 4:
        return (f"{subject} said that the {ADJECTIVES[rng.integers(len(ADJECTIVES))]} "
                f"{_noun(rng)} was not {ADJECTIVES[rng.integers(len(ADJECTIVES))]} .")
    if kind == 5:
        return (f"while {_verb(rng, 'ing')} {_np(rng)} , {subject} "
                f"{_verb(rng, 'past')} a {ADJECTIVES[rng.integers(len(ADJECTIVES))]} "
                f"{_noun(rng)} .")
    if kind == 6:
        return (f"{subject} and {NAMES[rng.integers(len(NAMES))]} "
                f"{_verb(rng, 'past')} {_np(rng)} together .")
    return (f"there was a {ADJECTIVES[rng.integers(len(ADJECTIVES))]} "
            f"{_noun(rng)} beside the {_noun(rng)} in {_place(rng)} .")


def make_document(rng) -> str:
    subject = NAMES[rng.integers(len(NAMES))]
    n = int(rng.integers(4, 11))
    return " ".join(_sentence(rng, subject) for _ in range(n))


def make_corpus(seed: int, target_bytes: int) -> str:
    rng = np.random.default_rng(seed)
    docs = []
    total = 0
    while total < target_bytes:
        doc = make_document(rng)
        docs.append(doc)
        total += len(doc) + 2
    return "\n\n".join(docs) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=814)
    ap.add_argument("--bytes", type=int, default=1_200_000)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "corpus.txt"))
    args = ap.parse_args(argv)
    text = make_corpus(args.seed, args.bytes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    words = set(text.split())
    print(f"wrote {out} ({len(text):,} bytes, {len(words)} distinct space-separated tokens)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
