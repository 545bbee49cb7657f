"""Local random-weight checkpoints of the three encoder architectures
(hidden size 768, one layer) with minimal tokenizers, so the export path runs
without any downloads. Real checkpoints go through the identical code path via
their model identifier."""

import warnings

import pytest

warnings.filterwarnings("ignore", message=".*beta.*")
warnings.filterwarnings("ignore", message=".*gamma.*")

WORDS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + \
    list("abcdefghijklmnopqrstuvwxyz") + \
    ["the", "a", "hello", "world", "news", "text", "##s", "##ing"]


def _build_wordpiece(dirname, kind):
    import torch  # noqa: F401 - keeps transformers import cheap and explicit
    from transformers import (BertConfig, BertModel, BertTokenizerFast,
                              DistilBertConfig, DistilBertModel,
                              DistilBertTokenizerFast)
    vocab_path = dirname / "base_vocab.txt"
    vocab_path.write_text("\n".join(WORDS))
    if kind == "bert":
        tok = BertTokenizerFast(vocab_file=str(vocab_path))
        model = BertModel(BertConfig(
            vocab_size=len(WORDS), hidden_size=768, num_hidden_layers=1,
            num_attention_heads=4, intermediate_size=64,
            max_position_embeddings=160))
    else:
        tok = DistilBertTokenizerFast(vocab_file=str(vocab_path))
        model = DistilBertModel(DistilBertConfig(
            vocab_size=len(WORDS), dim=768, n_layers=1, n_heads=4,
            hidden_dim=64, max_position_embeddings=160))
    out = dirname / kind
    tok.save_pretrained(str(out))
    model.save_pretrained(str(out))
    return str(out)


def _build_roberta(dirname):
    from tokenizers import Tokenizer, models, pre_tokenizers, processors
    from transformers import RobertaConfig, RobertaModel, RobertaTokenizerFast
    vocab = {"<s>": 0, "<pad>": 1, "</s>": 2, "<unk>": 3, "<mask>": 4}
    for i, ch in enumerate(sorted(pre_tokenizers.ByteLevel.alphabet())):
        vocab[ch] = 5 + i
    tok = Tokenizer(models.BPE(vocab=vocab, merges=[], unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.post_processor = processors.RobertaProcessing(sep=("</s>", 2),
                                                      cls=("<s>", 0))
    wrapped = RobertaTokenizerFast(
        tokenizer_object=tok, cls_token="<s>", sep_token="</s>",
        pad_token="<pad>", unk_token="<unk>", mask_token="<mask>",
        bos_token="<s>", eos_token="</s>")
    model = RobertaModel(RobertaConfig(
        vocab_size=len(vocab), hidden_size=768, num_hidden_layers=1,
        num_attention_heads=4, intermediate_size=64,
        max_position_embeddings=200, pad_token_id=1))
    out = dirname / "roberta"
    wrapped.save_pretrained(str(out))
    model.save_pretrained(str(out))
    return str(out)


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory):
    base = tmp_path_factory.mktemp("checkpoints")
    return {
        "bert": _build_wordpiece(base, "bert"),
        "roberta": _build_roberta(base),
        "distilbert": _build_wordpiece(base, "distilbert"),
    }


@pytest.fixture
def tiny_tsv(tmp_path):
    rows = [
        ("the news text", 0, 0, 0),
        ("hello world", 1, 0, 0),
        ("a b c d e", 0, 0, 1),
        ("world news", 1, 0, 1),
        ("text a hello", 2, 1, 0),
        ("the the the", 2, 1, 0),
        ("b world a", 3, 1, 1),
        ("news hello text", 3, 1, 1),
    ]
    path = tmp_path / "data.tsv"
    path.write_text("".join(f"{t}\t{l}\t{k}\t{d}\n" for t, l, k, d in rows))
    return str(path)
