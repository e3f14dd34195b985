import os

# keep transformers fully offline; every test resolves models from disk
os.environ.setdefault("HF_HUB_OFFLINE", "1")
os.environ.setdefault("TRANSFORMERS_OFFLINE", "1")

import pytest


@pytest.fixture(scope="session")
def local_encoder(tmp_path_factory):
    """Randomly initialized encoder with the 4-layer, 312-wide architecture.

    Stands in for the hosted TinyBERT_General_4L_312D checkpoint, which is
    not downloadable in the offline test environment; the architecture (and
    therefore every shape the exporter handles) is identical.
    """
    import torch
    from transformers import BertConfig, BertModel, BertTokenizer

    root = tmp_path_factory.mktemp("encoder") / "tinybert-4l-312d"
    root.mkdir()
    config = BertConfig(vocab_size=160, hidden_size=312, num_hidden_layers=4,
                        num_attention_heads=12, intermediate_size=1200,
                        max_position_embeddings=512)
    torch.manual_seed(42)
    model = BertModel(config)

    vocab = (["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
             + [chr(c) for c in range(ord("a"), ord("z") + 1)]
             + ["##" + chr(c) for c in range(ord("a"), ord("z") + 1)]
             + ["the", "a", "of", "and", "to", "in", "is", "for",
                "query", "document", "passage", "text", "retrieval",
                "neural", "model", "search", "ranking", "test",
                "##ing", "##ed", "##s", "##er", "##ion"])
    vocab_file = root / "vocab.txt"
    vocab_file.write_text("\n".join(vocab) + "\n", encoding="utf-8")
    tokenizer = BertTokenizer(str(vocab_file))
    model.save_pretrained(root)
    tokenizer.save_pretrained(root)
    return str(root)


@pytest.fixture()
def sample_tsv(tmp_path):
    lines = [
        "doc0\tthe query model is a test",
        "doc1\tneural retrieval of text passages",
        "doc2\tranking documents for a query",
        "doc3\tthe document text",
        "doc4\tsearch and ranking",
        "doc5\ta passage of text for retrieval",
        "doc6\tthe test model",
        "doc7\tneural search is a model",
        "doc8\tdocument ranking test",
        "doc9\tthe query document text",
    ]
    path = tmp_path / "collection.tsv"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
