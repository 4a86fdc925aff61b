import math

import pytest

import nmtforge as nf


def test_bpe_round_trip():
    lines = ["low lower lowest", "new newer newest", "wide wider widest"] * 3
    merges = nf.learn_bpe(lines, 12)
    assert len(merges) == 12
    for word in ["lowest", "newer", "unseen"]:
        assert nf.decode_bpe(nf.apply_bpe(word, merges)) == word
    pieces = nf.encode_line("lower widest", merges)
    assert nf.merge_subwords(pieces) == ["lower", "widest"]


def test_vocabulary_specials():
    v = nf.Vocabulary.build([["a", "b", "a"]])
    assert v.id("a") == 4
    assert v.id("zzz") == nf.UNK
    assert len(v) == 6


def test_bleu():
    b = nf.corpus_bleu(["the cat"], ["the cat sat"], max_n=2, smoothing="none")
    assert abs(b.score - 0.6065) < 1e-4
    assert str(b).startswith("BLEU = 60.65")
    assert nf.corpus_bleu(["a b c d"], ["a b c d"]).score == 1.0
    with pytest.raises(nf.AlignmentError):
        nf.corpus_bleu(["a"], [])


@pytest.mark.parametrize("arch", ["seq2seq-lstm", "attn-gru", "transformer"])
def test_model_counts_and_decoding(arch):
    cfg = nf.ModelConfig(arch)
    cfg.d_model, cfg.encoder_layers, cfg.decoder_layers = 16, 1, 1
    cfg.heads, cfg.d_ff = 2, 32
    cfg.source_vocab = cfg.target_vocab = 12
    model = nf.make_model(cfg, seed=3)
    assert model.count_parameters() == nf.expected_parameter_count(cfg)
    src = [4, 5, 6]
    assert nf.beam_decode(model, src, 1, 6) == nf.greedy_decode(model, src, 6)
    assert math.isfinite(nf.sequence_log_prob(model, src, [7, 8]))


def test_training_reduces_loss_and_attention_is_stochastic():
    data = nf.synth_task("copy", 6, 2, 4, 64, 1)
    cfg = nf.ModelConfig("attn-gru")
    cfg.d_model, cfg.encoder_layers, cfg.decoder_layers = 16, 1, 1
    cfg.source_vocab = len(data.source_vocab)
    cfg.target_vocab = len(data.target_vocab)
    model = nf.make_model(cfg, seed=2)
    before = nf.evaluate_loss(model, data)
    tc = nf.TrainConfig()
    tc.steps, tc.batch_size, tc.eval_every, tc.learning_rate = 60, 16, 0, 3e-3
    report = nf.train(model, data, None, tc)
    assert len(report.rows) == 60
    assert nf.evaluate_loss(model, data) < before

    grids = model.extract_attention(nf.encoder_input([4, 5]), [4, 5])
    assert len(grids) == 1
    for row in grids[0].weights:
        assert abs(sum(row) - 1.0) < 1e-6


def test_seq2seq_has_no_attention():
    cfg = nf.ModelConfig("seq2seq-lstm")
    cfg.d_model, cfg.encoder_layers, cfg.decoder_layers = 8, 1, 1
    cfg.source_vocab = cfg.target_vocab = 8
    model = nf.make_model(cfg)
    with pytest.raises(nf.UnsupportedArchitecture):
        model.extract_attention([4, nf.EOS], [5])
