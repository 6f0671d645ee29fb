// facecap: dataset statistics, retrieval, training, generation, evaluation
// and ablation sweeps behind one binary.
//
// Exit codes: 0 success, 2 validation error, 3 runtime error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "facecap/annotator.hpp"
#include "facecap/captioner.hpp"
#include "facecap/corpus.hpp"
#include "facecap/manifest.hpp"
#include "facecap/metrics.hpp"
#include "facecap/retrieval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

bool deterministic_mode() {
  const char* v = std::getenv("FACECAP_DETERMINISTIC");
  return v && std::string(v) == "1";
}

facecap::RunConfig resolve_config(const std::string& config_file,
                                  const std::vector<std::string>& sets) {
  facecap::RunConfig cfg;
  if (!config_file.empty()) cfg = facecap::load_config_file(config_file, cfg);
  for (const auto& kv : sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw facecap::ValidationError("--set expects key=value, got: " + kv);
    facecap::apply_config_line(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

facecap::RunManifest base_manifest(const std::string& command,
                                   const std::vector<std::string>& argv,
                                   const facecap::RunConfig& cfg,
                                   const std::string& dataset) {
  facecap::RunManifest m;
  m.command = command;
  m.argv = argv;
  m.config = facecap::config_to_json(cfg);
  m.dataset_path = dataset;
  m.dataset_sha256 = facecap::sha256_file(dataset);
  m.seed = cfg.seed;
  m.deterministic = deterministic_mode();
  return m;
}

// --- stats ---

int cmd_stats(const std::string& dataset, const std::string& format) {
  auto samples = facecap::load_dataset(dataset);
  auto st = facecap::compute_cooccurrence(samples);
  using facecap::Cell;
  const Cell order[] = {Cell::FyNy, Cell::FnNn, Cell::FyNn, Cell::FnNy};
  if (format == "json") {
    json j;
    j["total"] = st.total;
    for (Cell c : order) {
      j["counts"][facecap::to_string(c)] = st.counts.at(c);
      j["fractions"][facecap::to_string(c)] = st.fractions.at(c);
    }
    std::cout << j.dump(1) << "\n";
  } else {
    std::printf("%-6s %8s %10s\n", "cell", "count", "fraction");
    for (Cell c : order)
      std::printf("%-6s %8zu %10.6f\n", facecap::to_string(c).c_str(), st.counts.at(c),
                  st.fractions.at(c));
    std::printf("%-6s %8zu\n", "total", st.total);
  }
  return 0;
}

// --- retrieve ---

int cmd_retrieve(const std::string& dataset, int k, const std::string& out,
                 const facecap::RunConfig& cfg) {
  auto samples = facecap::load_dataset(dataset);
  facecap::ToyDualEncoder enc(cfg.d_image, cfg.retrieval_text_hash, cfg.retrieval_emb_dim,
                              cfg.retrieval_ref_dim, cfg.seed + 404);
  std::vector<std::string> lines;
  for (const auto& s : samples) {
    auto seg = facecap::retrieve(s, enc, k);
    json j;
    j["id"] = s.id;
    j["sentence_indices"] = seg.sentence_indices;
    lines.push_back(j.dump());
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write: " + out);
  for (const auto& l : lines) f << l << "\n";
  return 0;
}

// --- train ---

void save_checkpoint_dir(facecap::CaptionModel& model, const facecap::Lexicon& lexicon,
                         const std::string& dir) {
  model.params().save(dir + "/model.ckpt");
  std::ofstream cf(dir + "/config.json");
  cf << facecap::config_to_json(model.config()).dump(1) << "\n";
  lexicon.save(dir + "/lexicon.json");
}

int cmd_train(const std::string& dataset, const std::string& outdir,
              const facecap::RunConfig& cfg, const std::vector<std::string>& argv) {
  auto samples = facecap::load_dataset(dataset);
  facecap::WallTimer timer;
  auto manifest = base_manifest("train", argv, cfg, dataset);
  facecap::CaptionModel model(cfg);
  auto lexicon = facecap::Lexicon::build(samples, model.tokenizer());
  auto result = facecap::train(model, samples, cfg);
  fs::create_directories(outdir);
  save_checkpoint_dir(model, lexicon, outdir);
  {
    std::ofstream lg(outdir + "/train_log.jsonl");
    for (const auto& step : result.log) {
      json j;
      j["step"] = step.step;
      j["lr"] = step.lr;
      j["l_cap"] = step.l_cap;
      j["l_face"] = step.l_face;
      lg << j.dump() << "\n";
    }
  }
  manifest.artifacts = {"model.ckpt", "config.json", "lexicon.json", "train_log.jsonl"};
  manifest.wall_seconds = timer.seconds();
  manifest.save(outdir + "/manifest.json");
  if (result.aborted_on_nan) {
    std::cerr << "training aborted on non-finite loss after " << result.steps_run
              << " steps; last good checkpoint retained\n";
    return 3;
  }
  std::cout << "trained " << result.steps_run << " steps\n";
  return 0;
}

// --- generate ---

facecap::RunConfig load_checkpoint_config(const std::string& dir) {
  std::ifstream cf(dir + "/config.json");
  if (!cf) throw facecap::ValidationError("missing checkpoint config: " + dir + "/config.json");
  return facecap::config_from_json(json::parse(cf));
}

int cmd_generate(const std::string& ckpt, const std::string& dataset, int beam,
                 const std::string& out) {
  auto cfg = load_checkpoint_config(ckpt);
  auto samples = facecap::load_dataset(dataset);
  facecap::CaptionModel model(cfg);
  model.params().load(ckpt + "/model.ckpt");
  auto lexicon = facecap::Lexicon::load(ckpt + "/lexicon.json");
  std::vector<std::string> lines;
  for (const auto& s : samples) {
    auto g = model.generate(s, lexicon, beam);
    json j;
    j["id"] = s.id;
    j["caption"] = g.caption;
    j["logprob"] = g.beam_logprob;
    lines.push_back(j.dump());
  }
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write: " + out);
  for (const auto& l : lines) f << l << "\n";
  return 0;
}

// --- evaluate ---

json scores_json(const facecap::MetricReport& r) {
  json j;
  j["sample_count"] = r.sample_count;
  if (!r.has_metrics) {
    j["captions"] = nullptr;
    j["entities"] = nullptr;
    return j;
  }
  j["captions"] = {{"bleu4", r.captions.bleu4},
                   {"meteor", r.captions.meteor},
                   {"rougeL", r.captions.rougeL},
                   {"cider", r.captions.cider}};
  j["entities"] = {{"precision", r.entities.precision}, {"recall", r.entities.recall}};
  for (const auto& [t, pr] : r.per_type)
    j["entities_by_type"][facecap::to_string(t)] = {{"precision", pr.precision},
                                                    {"recall", pr.recall}};
  return j;
}

void print_report_row(const std::string& name, const facecap::MetricReport& r) {
  if (!r.has_metrics) {
    std::printf("%-8s %6zu %s\n", name.c_str(), r.sample_count, "(empty)");
    return;
  }
  std::printf("%-8s %6zu %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n", name.c_str(), r.sample_count,
              r.captions.bleu4, r.captions.meteor, r.captions.rougeL, r.captions.cider,
              100.0 * r.entities.precision, 100.0 * r.entities.recall);
}

struct EvalInputs {
  std::map<std::string, std::string> cands;
  std::map<std::string, std::vector<std::string>> refs;
  std::map<std::string, facecap::EntityMultiset> cand_entities;
  std::map<std::string, facecap::EntityMultiset> ref_entities;
};

EvalInputs build_eval_inputs(const std::map<std::string, std::string>& cands,
                             const std::vector<facecap::Sample>& samples) {
  EvalInputs in;
  in.cands = cands;
  facecap::RuleAnnotator annot;
  std::map<std::string, const facecap::Sample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  for (const auto& [id, cap] : cands) {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw facecap::ValidationError("candidate id not in dataset: " + id);
    in.refs[id] = {it->second->caption};
    in.ref_entities[id] = it->second->entities;
    in.cand_entities[id] = annot.annotate(cap);
  }
  return in;
}

int cmd_evaluate(const std::string& candidates, const std::string& dataset, bool subsets,
                 bool by_type, const std::string& out) {
  auto samples = facecap::load_dataset(dataset);
  std::map<std::string, std::string> cands;
  {
    std::ifstream f(candidates);
    if (!f) throw facecap::ValidationError("cannot open candidates: " + candidates);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
        cands[j.at("id").get<std::string>()] = j.at("caption").get<std::string>();
      } catch (const json::exception& e) {
        throw facecap::ValidationError(candidates + ":" + std::to_string(lineno) + ": " +
                                       e.what());
      }
    }
  }
  if (cands.empty()) throw facecap::ValidationError("no candidates in: " + candidates);
  auto in = build_eval_inputs(cands, samples);

  json report;
  report["schema_version"] = "1";
  std::printf("%-8s %6s %8s %8s %8s %8s %8s %8s\n", "subset", "n", "B-4", "M", "R-L", "C", "P",
              "R");
  auto overall = facecap::build_report(in.cands, in.refs, in.cand_entities, in.ref_entities,
                                       by_type);
  if (subsets) {
    std::map<facecap::Cell, std::vector<std::string>> cell_ids;
    for (const auto& s : samples)
      if (in.cands.count(s.id)) cell_ids[facecap::cell_of(s)].push_back(s.id);
    for (facecap::Cell c :
         {facecap::Cell::FyNy, facecap::Cell::FnNn, facecap::Cell::FyNn, facecap::Cell::FnNy})
      cell_ids[c];
    auto reports = facecap::subset_report(in.cands, in.refs, in.cand_entities, in.ref_entities,
                                          cell_ids, by_type);
    for (const auto& [name, r] : reports) {
      if (name == "overall") continue;
      report["subsets"][name] = scores_json(r);
      print_report_row(name, r);
    }
  }
  report["overall"] = scores_json(overall);
  print_report_row("overall", overall);
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write: " + out);
    f << report.dump(1) << "\n";
  }
  return 0;
}

// --- ablate / sweep-retrieval ---

facecap::MetricReport evaluate_model(facecap::CaptionModel& model,
                                     const facecap::Lexicon& lexicon,
                                     const std::vector<facecap::Sample>& samples) {
  std::map<std::string, std::string> cands;
  for (const auto& s : samples) cands[s.id] = model.generate(s, lexicon).caption;
  auto in = build_eval_inputs(cands, samples);
  return facecap::build_report(in.cands, in.refs, in.cand_entities, in.ref_entities, true);
}

int cmd_ablate(const std::string& dataset, const std::string& outdir,
               const facecap::RunConfig& base, const std::string& components,
               const std::vector<std::string>& argv) {
  auto samples = facecap::load_dataset(dataset);
  facecap::WallTimer timer;
  auto manifest = base_manifest("ablate", argv, base, dataset);

  struct Row {
    std::string name;
    bool vis, face, ret;
  };
  std::vector<Row> ladder;
  {
    // cumulative component ladder in the given order, starting text-only
    std::vector<std::string> comps;
    std::stringstream ss(components);
    std::string item;
    while (std::getline(ss, item, ',')) comps.push_back(item);
    bool vis = false, face = false, ret = false;
    int idx = 1;
    for (const auto& c : comps) {
      if (c == "text") {
      } else if (c == "vis") {
        vis = true;
      } else if (c == "face") {
        face = true;
      } else if (c == "retrieval") {
        ret = true;
      } else {
        throw facecap::ValidationError("unknown component: " + c);
      }
      ladder.push_back({"(" + std::to_string(idx++) + ")", vis, face, ret});
    }
  }

  fs::create_directories(outdir);
  json table = json::array();
  std::printf("%-5s %-4s %-4s %-4s %8s %8s %8s %8s %8s %8s\n", "model", "VF", "NF", "RS", "B-4",
              "M", "R-L", "C", "P", "R");
  for (const auto& row : ladder) {
    facecap::RunConfig cfg = base;
    cfg.use_visual = row.vis;
    cfg.use_face = row.face;
    cfg.use_retrieval = row.ret;
    facecap::CaptionModel model(cfg);
    auto lexicon = facecap::Lexicon::build(samples, model.tokenizer());
    facecap::train(model, samples, cfg);
    auto report = evaluate_model(model, lexicon, samples);
    std::string sub = outdir + "/model" + row.name;
    fs::create_directories(sub);
    save_checkpoint_dir(model, lexicon, sub);
    json r;
    r["model"] = row.name;
    r["use_visual"] = row.vis;
    r["use_face"] = row.face;
    r["use_retrieval"] = row.ret;
    r["report"] = scores_json(report);
    table.push_back(r);
    std::printf("%-5s %-4s %-4s %-4s %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n", row.name.c_str(),
                row.vis ? "x" : "", row.face ? "x" : "", row.ret ? "x" : "",
                report.captions.bleu4, report.captions.meteor, report.captions.rougeL,
                report.captions.cider, 100.0 * report.entities.precision,
                100.0 * report.entities.recall);
  }
  {
    std::ofstream f(outdir + "/ablation.json");
    f << table.dump(1) << "\n";
  }
  manifest.artifacts = {"ablation.json"};
  manifest.wall_seconds = timer.seconds();
  manifest.save(outdir + "/manifest.json");
  return 0;
}

int cmd_sweep(const std::string& dataset, const std::string& outdir,
              const std::vector<int>& ks, const facecap::RunConfig& base,
              const std::vector<std::string>& argv) {
  if (ks.empty()) throw facecap::ValidationError("sweep-retrieval: no k values given");
  auto samples = facecap::load_dataset(dataset);
  facecap::WallTimer timer;
  auto manifest = base_manifest("sweep-retrieval", argv, base, dataset);
  fs::create_directories(outdir);
  json table = json::array();
  std::printf("%-4s %8s %8s %8s %8s %8s %8s\n", "k", "B-4", "M", "R-L", "C", "P", "R");
  for (int k : ks) {
    facecap::RunConfig cfg = base;
    cfg.retrieval_k = k;
    cfg.use_retrieval = true;
    facecap::CaptionModel model(cfg);
    auto lexicon = facecap::Lexicon::build(samples, model.tokenizer());
    facecap::train(model, samples, cfg);
    auto report = evaluate_model(model, lexicon, samples);
    json r;
    r["k"] = k;
    r["report"] = scores_json(report);
    table.push_back(r);
    std::printf("%-4d %8.2f %8.2f %8.2f %8.2f %8.2f %8.2f\n", k, report.captions.bleu4,
                report.captions.meteor, report.captions.rougeL, report.captions.cider,
                100.0 * report.entities.precision, 100.0 * report.entities.recall);
  }
  {
    std::ofstream f(outdir + "/sweep.json");
    f << table.dump(1) << "\n";
  }
  manifest.artifacts = {"sweep.json"};
  manifest.wall_seconds = timer.seconds();
  manifest.save(outdir + "/manifest.json");
  return 0;
}

// --- align (debug) ---

int cmd_align(const std::string& ckpt, const std::string& dataset, const std::string& out) {
  auto cfg = load_checkpoint_config(ckpt);
  if (!cfg.use_face)
    throw facecap::ValidationError("align: checkpoint was trained without the face module");
  auto samples = facecap::load_dataset(dataset);
  facecap::CaptionModel model(cfg);
  model.params().load(ckpt + "/model.ckpt");
  json j;
  for (const auto& s : samples) {
    auto fwd = model.face_naming()->forward(s, model.tokenizer());
    std::vector<std::string> person_names;
    for (const auto& e : s.entities)
      if (e.type == facecap::EntityType::PERSON) person_names.push_back(e.surface);
    auto gt = facecap::gt_name_matrix(person_names, model.tokenizer(),
                                      model.params().get("backbone.tok_embed")->val);
    facecap::Mat A = fwd.face_states->val * gt.transpose();
    json rows = json::array();
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      json row = json::array();
      for (Eigen::Index c = 0; c < A.cols(); ++c) row.push_back(A(r, c));
      rows.push_back(row);
    }
    j[s.id] = {{"A", rows}, {"faces", A.rows()}, {"names_with_noname", A.cols()}};
  }
  if (out.empty()) {
    std::cout << j.dump(1) << "\n";
  } else {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write: " + out);
    f << j.dump(1) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"news image captioning toolkit"};
  app.require_subcommand(1);
  std::vector<std::string> argv_vec(argv, argv + argc);

  std::string dataset, out, outdir, config_file, ckpt, format = "table";
  std::string components = "text,vis,face,retrieval";
  std::vector<std::string> sets;
  std::vector<int> ks;
  int k = 8, beam = 5;
  bool subsets = false, by_type = false;

  auto add_cfg = [&](CLI::App* c) {
    c->add_option("--config", config_file, "flat key=value config file");
    c->add_option("--set", sets, "config override, key=value (repeatable)");
  };

  auto* c_stats = app.add_subcommand("stats", "face-name co-occurrence statistics");
  c_stats->add_option("--dataset", dataset)->required();
  c_stats->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

  auto* c_retr = app.add_subcommand("retrieve", "image-conditioned sentence retrieval");
  c_retr->add_option("--dataset", dataset)->required();
  c_retr->add_option("--k", k);
  c_retr->add_option("--out", out)->required();
  add_cfg(c_retr);

  auto* c_train = app.add_subcommand("train", "train a captioner");
  c_train->add_option("--dataset", dataset)->required();
  c_train->add_option("--out", outdir)->required();
  add_cfg(c_train);

  auto* c_gen = app.add_subcommand("generate", "beam-search caption generation");
  c_gen->add_option("--checkpoint", ckpt)->required();
  c_gen->add_option("--dataset", dataset)->required();
  c_gen->add_option("--beam", beam);
  c_gen->add_option("--out", out)->required();

  auto* c_eval = app.add_subcommand("evaluate", "caption metrics and entity P/R");
  c_eval->add_option("--candidates", out)->required();
  c_eval->add_option("--dataset", dataset)->required();
  c_eval->add_flag("--subsets", subsets);
  c_eval->add_flag("--by-type", by_type);
  std::string report_out;
  c_eval->add_option("--out", report_out);

  auto* c_abl = app.add_subcommand("ablate", "component ablation ladder");
  c_abl->add_option("--dataset", dataset)->required();
  c_abl->add_option("--out", outdir)->required();
  c_abl->add_option("--components", components, "cumulative ladder, comma separated");
  add_cfg(c_abl);

  auto* c_sweep = app.add_subcommand("sweep-retrieval", "retrieval-k sweep");
  c_sweep->add_option("--dataset", dataset)->required();
  c_sweep->add_option("--k-values", ks)->required()->delimiter(',');
  c_sweep->add_option("--out", outdir)->required();
  add_cfg(c_sweep);

  auto* c_align = app.add_subcommand("align", "dump face-name alignment matrices");
  c_align->add_option("--checkpoint", ckpt)->required();
  c_align->add_option("--dataset", dataset)->required();
  c_align->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*c_stats) return cmd_stats(dataset, format);
    auto cfg = resolve_config(config_file, sets);
    if (*c_retr) return cmd_retrieve(dataset, k, out, cfg);
    if (*c_train) return cmd_train(dataset, outdir, cfg, argv_vec);
    if (*c_gen) return cmd_generate(ckpt, dataset, beam, out);
    if (*c_eval) return cmd_evaluate(out, dataset, subsets, by_type, report_out);
    if (*c_abl) return cmd_ablate(dataset, outdir, cfg, components, argv_vec);
    if (*c_sweep) return cmd_sweep(dataset, outdir, ks, cfg, argv_vec);
    if (*c_align) return cmd_align(ckpt, dataset, out);
  } catch (const facecap::ValidationError& e) {
    std::cerr << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
