"""Regenerate the files shipped in src/dmla/data.

Run from the repository root: ``python3 scripts/build_data.py``. Output is
deterministic, so rerunning it leaves the tree unchanged.
"""

from pathlib import Path

from dmla.cli import SIM_PRESETS
from dmla.datafiles import write_dataset, write_listings
from dmla.llm_client import build_payload, build_prompt, write_transcript
from dmla.synth import DgpSpec, generate, generate_listings

DATA = Path(__file__).resolve().parents[1] / "src" / "dmla" / "data"
MOCK_LISTINGS = 5


def main():
    listings = generate_listings(n=333, seed=0)
    write_listings(DATA / "calibration_listings.jsonl", listings)

    spec = DgpSpec(**SIM_PRESETS["flagship"])
    write_dataset(DATA / "flagship", generate(spec).table, {"dgp": spec.to_dict()})

    # Replayable transcripts for the first few listings, one per prediction kind.
    sample = listings[:MOCK_LISTINGS]
    write_listings(DATA / "mock_listings.jsonl", sample)
    for lst in sample:
        for kind, value in (("price", f"{lst.price_guess:.2f}"), ("feedback_score", str(lst.score_guess))):
            req = build_prompt(kind, lst.text, lst.image_links, listing_id=lst.id)
            reply = f"- Reasoning omitted in this fixture.\n<final>{value}</final>"
            write_transcript(DATA / "transcripts", lst.id, kind, [(build_payload(req, "mock-model"), reply)])


if __name__ == "__main__":
    main()
