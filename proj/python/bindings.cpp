#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "nmt/bleu.hpp"
#include "nmt/bpe.hpp"
#include "nmt/corpus.hpp"
#include "nmt/error.hpp"
#include "nmt/heatmap.hpp"
#include "nmt/model.hpp"
#include "nmt/training.hpp"

namespace py = pybind11;
using namespace nmt;

namespace {

std::vector<std::pair<std::string, std::string>> merge_pairs(const MergeTable& t) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& m : t.merges()) out.emplace_back(m.left, m.right);
  return out;
}

MergeTable table_from(const std::vector<std::pair<std::string, std::string>>& pairs) {
  std::vector<MergePair> merges;
  for (const auto& [l, r] : pairs) merges.push_back({l, r});
  return MergeTable(std::move(merges));
}

}  // namespace

PYBIND11_MODULE(_nmtforge, m) {
  m.doc() = "Neural machine translation toolkit: BPE, three model families, training, decoding and BLEU.";

  auto base = py::register_exception<Error>(m, "NmtError");
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<IndexError>(m, "IndexError", base.ptr());
  py::register_exception<AlignmentError>(m, "AlignmentError", base.ptr());
  py::register_exception<UnsupportedArchitecture>(m, "UnsupportedArchitecture", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());

  m.attr("PAD") = static_cast<int>(kPad);
  m.attr("UNK") = static_cast<int>(kUnk);
  m.attr("BOS") = static_cast<int>(kBos);
  m.attr("EOS") = static_cast<int>(kEos);

  // subwords
  m.def(
      "learn_bpe",
      [](const std::vector<std::string>& lines, std::size_t merges) {
        return merge_pairs(learn_bpe(count_words(lines), merges));
      },
      py::arg("lines"), py::arg("merges"), "Learns merge operations from raw text lines; returns (left, right) pairs.");
  m.def(
      "apply_bpe",
      [](const std::string& word, const std::vector<std::pair<std::string, std::string>>& merges) {
        return apply_bpe(word, table_from(merges));
      },
      py::arg("word"), py::arg("merges"));
  m.def(
      "encode_line",
      [](const std::string& line, const std::vector<std::pair<std::string, std::string>>& merges) {
        BpeEncoder enc(table_from(merges));
        return enc.encode_line(line);
      },
      py::arg("line"), py::arg("merges"));
  m.def("decode_bpe", &decode_bpe, py::arg("pieces"));
  m.def("merge_subwords", &merge_subwords, py::arg("pieces"));

  py::class_<Vocabulary, std::shared_ptr<Vocabulary>>(m, "Vocabulary")
      .def(py::init<>())
      .def_static("build", &build_vocab, py::arg("sentences"))
      .def_static("load", &Vocabulary::load)
      .def("save", &Vocabulary::save)
      .def("add", &Vocabulary::add, py::arg("token"), py::arg("frequency") = 0)
      .def("id", &Vocabulary::id)
      .def("token", &Vocabulary::token)
      .def("encode", &Vocabulary::encode)
      .def("decode", &Vocabulary::decode)
      .def("__len__", &Vocabulary::size)
      .def("__contains__", &Vocabulary::contains);

  py::class_<ParallelCorpus>(m, "ParallelCorpus")
      .def_readonly("source", &ParallelCorpus::source)
      .def_readonly("target", &ParallelCorpus::target)
      .def_property_readonly("source_vocab", [](const ParallelCorpus& c) { return *c.source_vocab; })
      .def_property_readonly("target_vocab", [](const ParallelCorpus& c) { return *c.target_vocab; })
      .def("__len__", &ParallelCorpus::size);
  m.def(
      "synth_task",
      [](const std::string& kind, int vocab, std::size_t min_len, std::size_t max_len, std::size_t pairs,
         std::uint64_t seed) { return synth_task(parse_synth_kind(kind), vocab, {min_len, max_len}, pairs, seed); },
      py::arg("kind"), py::arg("vocab"), py::arg("min_len"), py::arg("max_len"), py::arg("pairs"), py::arg("seed"));

  // models
  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](const std::string& arch) { return ModelConfig::defaults(parse_architecture(arch)); }),
           py::arg("arch"))
      .def_property(
          "arch", [](const ModelConfig& c) { return architecture_name(c.arch); },
          [](ModelConfig& c, const std::string& a) { c.arch = parse_architecture(a); })
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("encoder_layers", &ModelConfig::encoder_layers)
      .def_readwrite("decoder_layers", &ModelConfig::decoder_layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("d_ff", &ModelConfig::d_ff)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def_readwrite("attention_dropout", &ModelConfig::attention_dropout)
      .def_readwrite("residual_dropout", &ModelConfig::residual_dropout)
      .def_readwrite("source_vocab", &ModelConfig::source_vocab)
      .def_readwrite("target_vocab", &ModelConfig::target_vocab)
      .def_readwrite("max_decode_len", &ModelConfig::max_decode_len)
      .def_readwrite("tie_embeddings", &ModelConfig::tie_embeddings)
      .def_readwrite("layer_norm", &ModelConfig::layer_norm)
      .def("validate", &ModelConfig::validate)
      .def("to_manifest", &ModelConfig::to_manifest);
  m.def("expected_parameter_count", &expected_parameter_count, py::arg("config"));

  py::class_<AttentionMatrix>(m, "AttentionMatrix")
      .def_readonly("weights", &AttentionMatrix::weights)
      .def_readonly("label", &AttentionMatrix::label)
      .def_readwrite("source_tokens", &AttentionMatrix::source_tokens)
      .def_readwrite("target_tokens", &AttentionMatrix::target_tokens)
      .def("tsv", &heatmap_tsv)
      .def("pgm", &heatmap_pgm);

  py::class_<Model, std::shared_ptr<Model>>(m, "Model")
      .def_property_readonly("config", &Model::config)
      .def("count_parameters", &Model::count_parameters)
      .def("parameter_names",
           [](const Model& model) {
             std::vector<std::string> names;
             for (const auto& e : model.parameters().entries()) names.push_back(e.name);
             return names;
           })
      .def("save", &Model::save)
      .def("extract_attention", &Model::extract_attention, py::arg("encoder_input"), py::arg("target"));
  m.def(
      "make_model", [](const ModelConfig& c, std::uint64_t seed) { return std::shared_ptr<Model>(make_model(c, seed)); },
      py::arg("config"), py::arg("seed") = 1);
  m.def(
      "load_model", [](const std::filesystem::path& p) { return std::shared_ptr<Model>(load_model(p)); },
      py::arg("checkpoint"));
  m.def("encoder_input", &encoder_input, py::arg("source"));
  m.def("greedy_decode", &greedy_decode, py::arg("model"), py::arg("source"), py::arg("max_len"),
        py::call_guard<py::gil_scoped_release>());
  m.def("beam_decode", &beam_decode, py::arg("model"), py::arg("source"), py::arg("beam"), py::arg("max_len"),
        py::arg("length_penalty") = 0.0, py::call_guard<py::gil_scoped_release>());
  m.def("sequence_log_prob", &sequence_log_prob, py::arg("model"), py::arg("source"), py::arg("tokens"),
        py::arg("with_eos") = true);

  // training
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("steps", &TrainConfig::steps)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("eval_every", &TrainConfig::eval_every)
      .def_readwrite("patience", &TrainConfig::patience)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("clip_norm", &TrainConfig::clip_norm)
      .def_readwrite("log_every", &TrainConfig::log_every)
      .def_property(
          "learning_rate", [](const TrainConfig& c) { return c.adam.learning_rate; },
          [](TrainConfig& c, double v) { c.adam.learning_rate = v; })
      .def_property(
          "warmup_steps", [](const TrainConfig& c) { return c.adam.warmup_steps; },
          [](TrainConfig& c, std::size_t v) { c.adam.warmup_steps = v; })
      .def_property(
          "out_dir", [](const TrainConfig& c) { return c.out_dir; },
          [](TrainConfig& c, const std::filesystem::path& p) { c.out_dir = p; });

  py::class_<TrainRow>(m, "TrainRow")
      .def_readonly("step", &TrainRow::step)
      .def_readonly("train_loss", &TrainRow::train_loss)
      .def_readonly("val_loss", &TrainRow::val_loss)
      .def_readonly("val_bleu", &TrainRow::val_bleu);
  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("rows", &TrainReport::rows)
      .def_readonly("steps", &TrainReport::steps)
      .def_readonly("best_step", &TrainReport::best_step)
      .def_readonly("best_val_loss", &TrainReport::best_val_loss)
      .def_readonly("early_stopped", &TrainReport::early_stopped)
      .def("to_tsv", &TrainReport::to_tsv);
  m.def(
      "train",
      [](Model& model, const ParallelCorpus& train_set, const ParallelCorpus* validation, const TrainConfig& config) {
        py::gil_scoped_release release;
        return train(model, train_set, validation, config);
      },
      py::arg("model"), py::arg("train_set"), py::arg("validation") = nullptr, py::arg("config") = TrainConfig{});
  m.def("evaluate_loss", &evaluate_loss, py::arg("model"), py::arg("corpus"), py::arg("batch_size") = 32);
  m.def("token_accuracy", &token_accuracy, py::arg("hypotheses"), py::arg("references"));

  // BLEU
  py::class_<BleuBreakdown>(m, "BleuBreakdown")
      .def_readonly("score", &BleuBreakdown::score)
      .def_readonly("precisions", &BleuBreakdown::precisions)
      .def_readonly("brevity_penalty", &BleuBreakdown::brevity_penalty)
      .def_readonly("hyp_len", &BleuBreakdown::hyp_len)
      .def_readonly("ref_len", &BleuBreakdown::ref_len)
      .def("__str__", &format_bleu);
  m.def(
      "corpus_bleu",
      [](const std::vector<std::string>& hyps, const std::vector<std::string>& refs, std::size_t max_n,
         const std::string& smoothing) {
        std::vector<Sentence> h, r;
        for (const auto& l : hyps) h.push_back(bleu_tokens(l));
        for (const auto& l : refs) r.push_back(bleu_tokens(l));
        return corpus_bleu(h, r, max_n, parse_smoothing(smoothing));
      },
      py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4, py::arg("smoothing") = "add-one",
      "Corpus BLEU over whitespace-tokenized lines; subword pieces are joined first.");
}
