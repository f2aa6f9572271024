"""Regenerate the bundled fixtures under src/icae_lab/fixtures."""

from pathlib import Path

from icae_lab.data import synthetic_corpus, synthetic_qa, write_qa_set

OUT = Path(__file__).resolve().parent.parent / "src" / "icae_lab" / "fixtures"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    docs = synthetic_corpus(seed=0, n_docs=1200)
    (OUT / "notes_corpus.txt").write_text("\n\n".join(docs) + "\n", encoding="utf-8")
    write_qa_set(synthetic_qa(seed=0, n=8), OUT / "qa_fixture.jsonl")


if __name__ == "__main__":
    main()
