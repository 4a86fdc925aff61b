#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "nmt/bleu.hpp"
#include "nmt/bpe.hpp"
#include "nmt/config.hpp"
#include "nmt/corpus.hpp"
#include "nmt/error.hpp"
#include "nmt/heatmap.hpp"
#include "nmt/model.hpp"
#include "nmt/training.hpp"

namespace fs = std::filesystem;
using namespace nmt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitSemantic = 3;
constexpr int kExitRuntime = 4;

// ---- run manifest -----------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config;
  std::string seed;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;

  void write(const fs::path& path) const {
    const std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    auto join = [](const std::vector<std::string>& v) {
      std::string out;
      for (const auto& s : v) out += (out.empty() ? "" : ",") + s;
      return out;
    };
    std::ofstream out(path, std::ios::binary);
    out << "command = " << command << '\n'
        << "config = " << config << '\n'
        << "seed = " << seed << '\n'
        << "inputs = " << join(inputs) << '\n'
        << "outputs = " << join(outputs) << '\n'
        << "version = " << NMT_VERSION << '\n'
        << "timestamp = " << stamp << '\n';
    if (!out) throw IoError("cannot write run manifest " + path.string());
  }
};

/// Next to the primary output unless --manifest says otherwise.
void write_manifest(const RunManifest& m, const std::string& override_path, const fs::path& beside) {
  if (!override_path.empty()) {
    m.write(override_path);
  } else if (!beside.empty()) {
    m.write(fs::path(beside.string() + ".run"));
  }
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

std::vector<std::vector<std::string>> tokenized(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (const auto& l : lines) out.push_back(split_whitespace(l));
  return out;
}

std::size_t thread_count() {
  const char* env = std::getenv("NMTF_THREADS");
  if (!env || !*env) return 1;
  try {
    const long n = std::stol(env);
    if (n < 1) throw ConfigError("NMTF_THREADS must be a positive integer, got '" + std::string(env) + "'");
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw ConfigError("NMTF_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
}

const std::set<std::string>& train_keys() {
  static const std::set<std::string> keys{"steps",     "batch_size",     "eval_every", "patience",     "log_every",
                                          "warmup_steps", "bleu_beam",   "max_decode_len", "seed",     "lr",
                                          "beta1",     "beta2",          "epsilon",    "clip_norm",    "bleu_smoothing",
                                          "max_sentence_len"};
  return keys;
}

std::set<std::string> model_keys() {
  std::set<std::string> keys{"layers"};
  const KeyValues fields = KeyValues::parse(ModelConfig{}.to_manifest());
  for (const auto& [k, v] : fields.values()) keys.insert(k);
  return keys;
}

KeyValues with_overrides(const std::string& config, const std::vector<std::string>& overrides) {
  KeyValues kv = config.empty() ? KeyValues{} : KeyValues::load(config);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    const KeyValues one = KeyValues::parse(o.substr(0, eq) + " = " + o.substr(eq + 1), "--set");
    for (const auto& [k, v] : one.values()) kv.set(k, v);
  }
  return kv;
}

void reject_unknown(const KeyValues& kv) {
  const auto known = model_keys();
  for (const auto& [k, v] : kv.values()) {
    if (!known.count(k) && !train_keys().count(k)) throw ConfigError("unknown configuration key '" + k + "'");
  }
}

/// --arch picks the defaults; a config file may repeat it but not contradict it.
ModelConfig model_config(const std::string& arch_name, const KeyValues& kv) {
  reject_unknown(kv);
  const Architecture arch = parse_architecture(arch_name);
  if (kv.has("arch") && parse_architecture(kv.get("arch")) != arch) {
    throw ConfigError("config sets arch = " + kv.get("arch") + " but --arch is " + arch_name);
  }
  ModelConfig mc = ModelConfig::defaults(arch);
  mc.apply(kv);
  return mc;
}

/// Vocabulary files live next to the checkpoint unless given explicitly.
std::shared_ptr<const Vocabulary> vocab_for(const fs::path& checkpoint, const std::string& explicit_path,
                                            const char* name) {
  const fs::path p = explicit_path.empty() ? checkpoint.parent_path() / name : fs::path(explicit_path);
  return std::make_shared<const Vocabulary>(Vocabulary::load(p));
}

// ---- commands ---------------------------------------------------------------

struct BpeLearnArgs {
  std::vector<std::string> inputs;
  std::size_t merges = 0;
  std::string output;
  bool joint = false;
};

void bpe_learn(const BpeLearnArgs& a, const std::string& manifest) {
  if (a.inputs.size() > 1 && !a.joint) throw ConfigError("several --input files form one joint table; pass --joint");
  std::vector<std::string> lines;
  for (const auto& in : a.inputs) {
    auto more = read_lines(in);
    lines.insert(lines.end(), more.begin(), more.end());
  }
  const MergeTable table = learn_bpe(count_words(lines), a.merges);
  save_merges(a.output, table);
  std::cerr << "learned " << table.size() << " merges\n";
  write_manifest({a.joint ? "bpe-learn --joint" : "bpe-learn", "", "", a.inputs, {a.output}}, manifest, a.output);
}

struct BpeApplyArgs {
  std::string merges, input, output;
};

void bpe_apply(const BpeApplyArgs& a, const std::string& manifest) {
  BpeEncoder enc(load_merges(a.merges));
  std::ostringstream out;
  for (const auto& line : read_lines(a.input)) {
    const auto pieces = enc.encode_line(line);
    for (std::size_t i = 0; i < pieces.size(); ++i) out << (i ? " " : "") << pieces[i];
    out << '\n';
  }
  if (a.output.empty()) {
    std::cout << out.str();
  } else {
    write_file(a.output, out.str());
  }
  write_manifest({"bpe-apply", "", "", {a.merges, a.input}, {a.output}}, manifest, a.output);
}

struct SynthArgs {
  std::string task = "copy";
  int vocab = 20;
  std::size_t min_len = 5, max_len = 10, pairs = 1000;
  std::uint64_t seed = 1;
  std::string out_prefix;
};

void synth(const SynthArgs& a, const std::string& manifest) {
  const ParallelCorpus c = synth_task(parse_synth_kind(a.task), a.vocab, {a.min_len, a.max_len}, a.pairs, a.seed);
  std::string src, tgt;
  for (std::size_t i = 0; i < c.size(); ++i) {
    src += ids_to_line(*c.source_vocab, c.source[i]) + '\n';
    tgt += ids_to_line(*c.target_vocab, c.target[i]) + '\n';
  }
  write_file(a.out_prefix + ".src", src);
  write_file(a.out_prefix + ".tgt", tgt);
  write_manifest({"synth " + a.task, "", std::to_string(a.seed), {}, {a.out_prefix + ".src", a.out_prefix + ".tgt"}},
                 manifest, a.out_prefix);
}

struct TrainArgs {
  std::string arch, config, src, tgt, valid_src, valid_tgt, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::vector<std::string> overrides;
};

void train_cmd(const TrainArgs& a, const std::string& manifest) {
  const KeyValues kv = with_overrides(a.config, a.overrides);
  ModelConfig mc = model_config(a.arch, kv);
  TrainConfig tc;
  tc.apply(kv);
  if (a.seed) tc.seed = *a.seed;
  if (a.steps) tc.steps = *a.steps;
  tc.out_dir = a.out_dir;
  const std::size_t max_sentence = kv.has("max_sentence_len") ? static_cast<std::size_t>(kv.get_int("max_sentence_len")) : 100;

  const ParallelText text = load_parallel(a.src, a.tgt, max_sentence);
  if (text.size() == 0) throw ConfigError("no usable sentence pairs in " + a.src + " / " + a.tgt);
  auto src_vocab = std::make_shared<const Vocabulary>(build_vocab(text.source));
  auto tgt_vocab = std::make_shared<const Vocabulary>(build_vocab(text.target));
  const ParallelCorpus train_set = encode_corpus(text, src_vocab, tgt_vocab);
  std::optional<ParallelCorpus> valid;
  if (!a.valid_src.empty() || !a.valid_tgt.empty()) {
    if (a.valid_src.empty() || a.valid_tgt.empty()) throw ConfigError("--valid-src and --valid-tgt go together");
    valid = encode_corpus(load_parallel(a.valid_src, a.valid_tgt, max_sentence), src_vocab, tgt_vocab);
  }
  mc.source_vocab = src_vocab->size();
  mc.target_vocab = tgt_vocab->size();

  fs::create_directories(a.out_dir);
  src_vocab->save(fs::path(a.out_dir) / "src.vocab");
  tgt_vocab->save(fs::path(a.out_dir) / "tgt.vocab");
  std::cerr << "pairs " << train_set.size() << " (dropped " << text.dropped << "), vocab " << mc.source_vocab << "/"
            << mc.target_vocab << '\n';

  const auto model = make_model(mc, tc.seed);
  std::cerr << architecture_name(mc.arch) << ": " << model->count_parameters() << " parameters\n";
  const TrainReport r =
      train(*model, train_set, valid ? &*valid : nullptr, tc, [](const std::string& line) { std::cout << line << std::endl; });
  std::cerr << "finished " << r.steps << " steps in " << r.wall_seconds << " s\n";

  std::vector<std::string> inputs{a.src, a.tgt};
  if (valid) {
    inputs.push_back(a.valid_src);
    inputs.push_back(a.valid_tgt);
  }
  const fs::path dir(a.out_dir);
  write_manifest({"train " + architecture_name(mc.arch), a.config, std::to_string(tc.seed), inputs,
                  {(dir / "model.nmtf").string(), (dir / "last.nmtf").string(), (dir / "report.tsv").string()}},
                 manifest.empty() ? (dir / "run.manifest").string() : manifest, {});
}

struct TranslateArgs {
  std::string checkpoint, input, output, src_vocab, tgt_vocab;
  std::size_t beam = 1;
  std::size_t max_len = 0;
  double length_penalty = 0.0;
};

void translate_cmd(const TranslateArgs& a, const std::string& manifest) {
  const auto model = load_model(a.checkpoint);
  const auto sv = vocab_for(a.checkpoint, a.src_vocab, "src.vocab");
  const auto tv = vocab_for(a.checkpoint, a.tgt_vocab, "tgt.vocab");
  if (sv->size() != model->config().source_vocab || tv->size() != model->config().target_vocab) {
    throw ConfigError("vocabulary sizes do not match the checkpoint");
  }
  if (a.beam < 1) throw ConfigError("beam width must be at least 1");
  const std::size_t max_len = a.max_len ? a.max_len : model->config().max_decode_len;
  const auto lines = read_lines(a.input);
  std::vector<std::string> results(lines.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < lines.size(); i = next++) {
      const TokenIds src = sv->encode(split_whitespace(lines[i]));
      const TokenIds out = a.beam == 1 ? greedy_decode(*model, src, max_len)
                                       : beam_decode(*model, src, a.beam, max_len, a.length_penalty);
      results[i] = ids_to_line(*tv, out);
    }
  };
  const std::size_t threads = std::min(thread_count(), std::max<std::size_t>(lines.size(), 1));
  std::vector<std::jthread> pool;
  for (std::size_t t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  pool.clear();

  std::ostringstream out;
  for (const auto& r : results) out << r << '\n';
  if (a.output.empty()) {
    std::cout << out.str();
  } else {
    write_file(a.output, out.str());
  }
  write_manifest({"translate", "", "", {a.checkpoint, a.input}, {a.output}}, manifest, a.output);
}

struct EvaluateArgs {
  std::string hyp, ref, smoothing = "add-one";
  std::size_t max_n = 4;
};

void evaluate_cmd(const EvaluateArgs& a, const std::string& manifest) {
  const auto hyps = read_lines(a.hyp);
  const auto refs = read_lines(a.ref);
  std::vector<Sentence> h, r;
  for (const auto& l : hyps) h.push_back(bleu_tokens(l));
  for (const auto& l : refs) r.push_back(bleu_tokens(l));
  std::cout << format_bleu(corpus_bleu(h, r, a.max_n, parse_smoothing(a.smoothing))) << '\n';
  write_manifest({"evaluate --smoothing " + a.smoothing, "", "", {a.hyp, a.ref}, {}}, manifest, {});
}

struct HeatmapArgs {
  std::string checkpoint, src_sentence, tgt_sentence, out_prefix, src_vocab, tgt_vocab;
};

void heatmap_cmd(const HeatmapArgs& a, const std::string& manifest) {
  const auto model = load_model(a.checkpoint);
  if (model->config().arch == Architecture::kSeq2SeqLstm) throw UnsupportedArchitecture("architecture has no attention");
  const auto sv = vocab_for(a.checkpoint, a.src_vocab, "src.vocab");
  const auto tv = vocab_for(a.checkpoint, a.tgt_vocab, "tgt.vocab");
  const auto src_tokens = split_whitespace(a.src_sentence);
  const auto tgt_tokens = split_whitespace(a.tgt_sentence);
  if (src_tokens.empty() || tgt_tokens.empty()) throw ConfigError("heatmap needs non-empty source and target sentences");
  auto grids = model->extract_attention(sv->encode(src_tokens), tv->encode(tgt_tokens));
  std::vector<std::string> outputs;
  for (auto& g : grids) {
    g.source_tokens = src_tokens;
    g.target_tokens = tgt_tokens;
    const std::string prefix = grids.size() == 1 ? a.out_prefix : a.out_prefix + "." + g.label;
    write_heatmap(g, prefix);
    outputs.push_back(prefix + ".tsv");
    outputs.push_back(prefix + ".pgm");
  }
  for (const auto& o : outputs) std::cout << o << '\n';
  write_manifest({"heatmap", "", "", {a.checkpoint}, outputs}, manifest, a.out_prefix);
}

struct ParamsArgs {
  std::string arch, config;
  std::size_t src_vocab = 0, tgt_vocab = 0;
  std::vector<std::string> overrides;
};

void params_cmd(const ParamsArgs& a) {
  ModelConfig mc = model_config(a.arch, with_overrides(a.config, a.overrides));
  mc.source_vocab = a.src_vocab;
  mc.target_vocab = a.tgt_vocab;
  mc.validate();
  std::cout << expected_parameter_count(mc) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"nmtforge: subword NMT toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", NMT_VERSION);
  std::string manifest;
  app.add_option("--manifest", manifest, "Where to write the run manifest");

  BpeLearnArgs bl;
  auto* c_bl = app.add_subcommand("bpe-learn", "Learn BPE merges from text");
  c_bl->add_option("--input", bl.inputs, "Training text (repeatable)")->required();
  c_bl->add_option("--merges", bl.merges, "Number of merge operations")->required();
  c_bl->add_option("--output", bl.output, "Merges file")->required();
  c_bl->add_flag("--joint", bl.joint, "Learn one table over all inputs (e.g. both languages)");

  BpeApplyArgs ba;
  auto* c_ba = app.add_subcommand("bpe-apply", "Segment text with learned merges");
  c_ba->add_option("--merges", ba.merges)->required();
  c_ba->add_option("--input", ba.input)->required();
  c_ba->add_option("--output", ba.output, "Output file (default: stdout)");

  SynthArgs sy;
  auto* c_sy = app.add_subcommand("synth", "Write a synthetic parallel task");
  c_sy->add_option("--task", sy.task, "copy, reverse or increment");
  c_sy->add_option("--vocab", sy.vocab);
  c_sy->add_option("--min-len", sy.min_len);
  c_sy->add_option("--max-len", sy.max_len);
  c_sy->add_option("--pairs", sy.pairs);
  c_sy->add_option("--seed", sy.seed);
  c_sy->add_option("--out-prefix", sy.out_prefix, "Writes <prefix>.src and <prefix>.tgt")->required();

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train a model");
  c_tr->add_option("--arch", tr.arch, "seq2seq-lstm, attn-gru or transformer")->required();
  c_tr->add_option("--config", tr.config, "key = value file");
  c_tr->add_option("--data-src", tr.src)->required();
  c_tr->add_option("--data-tgt", tr.tgt)->required();
  c_tr->add_option("--valid-src", tr.valid_src);
  c_tr->add_option("--valid-tgt", tr.valid_tgt);
  c_tr->add_option("--seed", tr.seed);
  c_tr->add_option("--steps", tr.steps);
  c_tr->add_option("--set", tr.overrides, "key=value override (repeatable)");
  c_tr->add_option("--out-dir", tr.out_dir)->required();

  TranslateArgs tl;
  auto* c_tl = app.add_subcommand("translate", "Translate a file line by line");
  c_tl->add_option("--checkpoint", tl.checkpoint)->required();
  c_tl->add_option("--input", tl.input)->required();
  c_tl->add_option("--output", tl.output, "Output file (default: stdout)");
  c_tl->add_option("--beam", tl.beam);
  c_tl->add_option("--max-len", tl.max_len, "0 uses the model's limit");
  c_tl->add_option("--length-penalty", tl.length_penalty);
  c_tl->add_option("--src-vocab", tl.src_vocab);
  c_tl->add_option("--tgt-vocab", tl.tgt_vocab);

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Corpus BLEU of a hypothesis file");
  c_ev->add_option("--hyp", ev.hyp)->required();
  c_ev->add_option("--ref", ev.ref)->required();
  c_ev->add_option("--smoothing", ev.smoothing, "none or add-one");
  c_ev->add_option("--max-n", ev.max_n);

  HeatmapArgs hm;
  auto* c_hm = app.add_subcommand("heatmap", "Export attention grids as TSV and PGM");
  c_hm->add_option("--checkpoint", hm.checkpoint)->required();
  c_hm->add_option("--src-sentence", hm.src_sentence)->required();
  c_hm->add_option("--tgt-sentence", hm.tgt_sentence)->required();
  c_hm->add_option("--out-prefix", hm.out_prefix)->required();
  c_hm->add_option("--src-vocab", hm.src_vocab);
  c_hm->add_option("--tgt-vocab", hm.tgt_vocab);

  ParamsArgs pa;
  auto* c_pa = app.add_subcommand("params", "Closed-form trainable parameter count");
  c_pa->add_option("--arch", pa.arch)->required();
  c_pa->add_option("--config", pa.config);
  c_pa->add_option("--src-vocab", pa.src_vocab)->required();
  c_pa->add_option("--tgt-vocab", pa.tgt_vocab)->required();
  c_pa->add_option("--set", pa.overrides);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*c_bl) bpe_learn(bl, manifest);
    if (*c_ba) bpe_apply(ba, manifest);
    if (*c_sy) synth(sy, manifest);
    if (*c_tr) train_cmd(tr, manifest);
    if (*c_tl) translate_cmd(tl, manifest);
    if (*c_ev) evaluate_cmd(ev, manifest);
    if (*c_hm) heatmap_cmd(hm, manifest);
    if (*c_pa) params_cmd(pa);
  } catch (const UnsupportedArchitecture& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitSemantic;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const AlignmentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}
