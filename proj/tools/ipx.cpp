// ipx: command-line front end for the infant fingerprint engine.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ipx/error.hpp"
#include "ipx/evalharness.hpp"
#include "ipx/fusion.hpp"
#include "ipx/gallery.hpp"
#include "ipx/imgproc.hpp"
#include "ipx/minutiae.hpp"
#include "ipx/service.hpp"
#include "ipx/synthgen.hpp"
#include "ipx/texture.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ipx;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::CorruptData, path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
}

bool is_json_path(const std::string& path) { return fs::path(path).extension() == ".json"; }

std::optional<int> ppi_opt(int ppi) { return ppi > 0 ? std::optional<int>(ppi) : std::nullopt; }

json grid_json(const auto& grid) {
  json data = json::array();
  for (int r = 0; r < grid.rows(); ++r) {
    for (int c = 0; c < grid.cols(); ++c) data.push_back(grid.at(c, r));
  }
  return data;
}

FingerprintImage skeleton_image(const imgproc::Skeleton& s) {
  FingerprintImage img(s.width, s.height, s.ppi, 255);
  for (int y = 0; y < s.height; ++y) {
    for (int x = 0; x < s.width; ++x) {
      if (s.at(x, y)) img.at(x, y) = 0;
    }
  }
  return img;
}

/// Dark pixels are ridge.
imgproc::Skeleton skeleton_from_image(const FingerprintImage& img) {
  imgproc::Skeleton s{img.width(), img.height(), Grid<std::uint8_t>(img.width(), img.height(), 0), img.ppi()};
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) s.pixels.at(x, y) = img.at(x, y) < 128 ? 1 : 0;
  }
  return s;
}

minutiae::MinutiaSet load_minutiae(const std::string& path) {
  if (is_json_path(path)) return minutiae::from_json(read_json(path));
  auto bytes = read_file_bytes(path);
  return minutiae::parse_text(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

texture::TextureEmbedding load_embedding(const std::string& path) {
  if (is_json_path(path)) return texture::from_json(read_json(path));
  return texture::from_emb(read_file_bytes(path));
}

struct CaptureArgs {
  std::vector<std::string> left, right;
  int ppi = 0;
};

void add_capture_options(CLI::App* cmd, CaptureArgs& args) {
  cmd->add_option("--left", args.left, "Left thumb image (repeatable)");
  cmd->add_option("--right", args.right, "Right thumb image (repeatable)");
  cmd->add_option("--ppi", args.ppi, "Resolution when the files do not carry one");
}

fusion::SubjectTemplate template_from_files(const CaptureArgs& args, fusion::Role role, const std::string& subject_id) {
  std::vector<FingerprintImage> images;
  const int session = role == fusion::Role::Enrollment ? 1 : 3;
  for (Finger f : {Finger::LeftThumb, Finger::RightThumb}) {
    int impression = 0;
    for (const auto& path : f == Finger::LeftThumb ? args.left : args.right) {
      auto img = load_image_file(path, ppi_opt(args.ppi));
      img.set_meta(CaptureMeta{subject_id, f, session, ++impression, 0, 0});
      images.push_back(std::move(img));
    }
  }
  if (images.empty()) throw Error(ErrorCode::NoCaptures, "give at least one --left or --right image");
  return fusion::build_template(images, role);
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stoi(item));
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
  return out;
}

eval::RunOptions run_options(unsigned threads) {
  eval::RunOptions o;
  o.threads = threads;
  o.progress = [last = std::chrono::steady_clock::time_point{}](std::string_view stage, std::size_t done,
                                                                  std::size_t total) mutable {
    const auto now = std::chrono::steady_clock::now();
    if (done != total && now - last < std::chrono::seconds(5)) return;
    last = now;
    std::fprintf(stderr, "%.*s %zu/%zu\n", static_cast<int>(stage.size()), stage.data(), done, total);
  };
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Infant fingerprint recognition engine"};
  app.require_subcommand(1);

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Segment, estimate orientation/frequency, enhance and thin");
  std::string pre_in, pre_out;
  int pre_ppi = 0, pre_block = 0;
  pre->add_option("input", pre_in, "Capture (PGM or PNG)")->required();
  pre->add_option("--ppi", pre_ppi, "Resolution when the file does not carry one");
  pre->add_option("--out-dir", pre_out, "Output directory")->required();
  pre->add_option("--block-size", pre_block, "Block size in pixels");
  pre->callback([&] {
    auto img = load_image_file(pre_in, ppi_opt(pre_ppi));
    auto p = imgproc::preprocess(img, pre_block > 0 ? std::optional<int>(pre_block) : std::nullopt);
    const auto& a = p.analysis;
    json j{{"ppi", img.ppi()},
           {"width", img.width()},
           {"height", img.height()},
           {"block_size", a.block_size},
           {"cols", a.mask.cols()},
           {"rows", a.mask.rows()},
           {"layout", "row-major, block (c, r) covers pixels [c*block_size, (c+1)*block_size) x [r*block_size, (r+1)*block_size)"},
           {"mask", grid_json(a.mask)},
           {"orientation_rad", grid_json(a.orientation)},
           {"frequency_cycles_per_px", grid_json(a.frequency)},
           {"coherence", grid_json(a.coherence)}};
    fs::create_directories(pre_out);
    write_text(fs::path(pre_out) / "analysis.json", j.dump(1));
    write_image_file(p.enhanced, (fs::path(pre_out) / "enhanced.pgm").string());
    write_image_file(skeleton_image(p.skeleton), (fs::path(pre_out) / "skeleton.pgm").string());
  });

  // minutiae
  auto* mnt = app.add_subcommand("minutiae", "Extract minutiae from a capture or a skeleton image");
  std::string mnt_in, mnt_out;
  int mnt_ppi = 0;
  bool mnt_skeleton = false;
  mnt->add_option("input", mnt_in, "Capture, or skeleton image with --skeleton")->required();
  mnt->add_option("--ppi", mnt_ppi, "Resolution when the file does not carry one");
  mnt->add_flag("--skeleton", mnt_skeleton, "Input is a thinned skeleton (dark ridges)");
  mnt->add_option("--out", mnt_out, "Template file (.min text or .json)")->required();
  mnt->callback([&] {
    auto img = load_image_file(mnt_in, ppi_opt(mnt_ppi));
    minutiae::MinutiaSet set;
    if (mnt_skeleton) {
      set = minutiae::extract_minutiae(skeleton_from_image(img), imgproc::analyze(img));
    } else {
      auto p = imgproc::preprocess(img);
      set = minutiae::extract_minutiae(p.skeleton, p.analysis);
    }
    write_text(mnt_out, is_json_path(mnt_out) ? minutiae::to_json(set).dump(1) : minutiae::to_text(set));
    std::printf("%zu minutiae\n", set.size());
  });

  // match-min
  auto* mm = app.add_subcommand("match-min", "Minutiae match score of two templates");
  std::string mm_a, mm_b;
  mm->add_option("a", mm_a)->required();
  mm->add_option("b", mm_b)->required();
  mm->callback([&] {
    auto r = minutiae::match_minutiae(load_minutiae(mm_a), load_minutiae(mm_b));
    std::printf("%s\n", json{{"score", r.score}, {"matched", r.matched}, {"empty_set", r.empty_set}}.dump().c_str());
  });

  // embed
  auto* emb = app.add_subcommand("embed", "Texture embedding of a capture");
  std::string emb_in, emb_out;
  int emb_ppi = 0;
  bool emb_raw = false;
  emb->add_option("input", emb_in)->required();
  emb->add_option("--ppi", emb_ppi, "Resolution when the file does not carry one");
  emb->add_flag("--raw", emb_raw, "Describe the raw capture instead of the enhanced image");
  emb->add_option("--out", emb_out, "Embedding file (.emb or .json)")->required();
  emb->callback([&] {
    auto img = load_image_file(emb_in, ppi_opt(emb_ppi));
    auto e = texture::extract_embedding(img, imgproc::analyze(img), {emb_raw});
    if (is_json_path(emb_out)) {
      write_text(emb_out, texture::to_json(e).dump());
    } else {
      write_file_bytes(emb_out, texture::to_emb(e));
    }
  });

  // compare
  auto* cmp = app.add_subcommand("compare", "Cosine similarity of two embeddings");
  std::string cmp_a, cmp_b;
  cmp->add_option("a", cmp_a)->required();
  cmp->add_option("b", cmp_b)->required();
  cmp->callback([&] {
    auto c = texture::compare_checked(load_embedding(cmp_a), load_embedding(cmp_b));
    std::printf("%s\n", json{{"similarity", c.similarity}, {"extractor_mismatch", c.extractor_mismatch}}.dump().c_str());
  });

  // synth
  auto* syn = app.add_subcommand("synth", "Render a synthetic longitudinal cohort");
  int syn_n = 0;
  std::uint64_t syn_seed = 1;
  std::string syn_out, syn_schedule;
  syn->add_option("--subjects", syn_n)->required()->check(CLI::PositiveNumber);
  syn->add_option("--seed", syn_seed)->required();
  syn->add_option("--out-dir", syn_out)->required();
  syn->add_option("--schedule", syn_schedule, "Schedule JSON (default: the standard three-session schedule)");
  syn->callback([&] {
    auto schedule = syn_schedule.empty() ? synth::Schedule::standard() : synth::schedule_from_json(read_json(syn_schedule));
    auto m = synth::gen_cohort(syn_n, schedule, syn_seed, syn_out);
    std::size_t captures = 0;
    for (const auto& s : m.subjects) captures += s.captures.size();
    std::printf("%zu subjects, %zu captures in %s\n", m.subjects.size(), captures, syn_out.c_str());
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Verification and identification report over a cohort");
  std::string ev_manifest, ev_protocol, ev_out, ev_cal, ev_strata = "0,28,56", ev_thresholds;
  unsigned ev_threads = 1;
  bool ev_render = false;
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--protocol", ev_protocol, "Protocol JSON (default: sessions 1-2 vs 3, all stacks, FAR 0.1% and 1%)");
  ev->add_option("--out", ev_out, "Report directory")->required();
  ev->add_option("--calibration", ev_cal, "Calibration JSON (default: uncalibrated)");
  ev->add_option("--strata", ev_strata, "Minimum enrollment ages in days");
  ev->add_option("--threads", ev_threads);
  ev->add_flag("--render", ev_render, "Render captures from the manifest seeds instead of reading files");
  ev->add_option("--thresholds-out", ev_thresholds, "Also export the fused FAR -> threshold table of the first stratum");
  ev->callback([&] {
    auto manifest = synth::load_manifest(ev_manifest);
    auto protocol = ev_protocol.empty() ? eval::ProtocolSpec{} : eval::protocol_from_json(read_json(ev_protocol));
    auto cal = ev_cal.empty() ? fusion::Calibration::uncalibrated() : fusion::load_calibration(ev_cal);
    auto source = ev_render ? eval::render_source(manifest) : eval::disk_source(fs::path(ev_manifest).parent_path());
    auto table = eval::run_ablation(manifest, source, protocol, parse_int_list(ev_strata), cal, run_options(ev_threads));
    eval::write_report(table, ev_out);
    std::printf("%s", eval::format_table(table).c_str());
    std::printf("report hash %s\n", eval::report_hash(table).c_str());
    if (!ev_thresholds.empty()) {
      const auto it = std::find(table.stacks.begin(), table.stacks.end(), eval::Stack::Fused);
      if (it == table.stacks.end()) throw Error(ErrorCode::InvalidArgument, "protocol has no fused stack");
      auto t = eval::export_threshold_table(table.at(0, static_cast<std::size_t>(it - table.stacks.begin())),
                                            {0.0, 0.001, 0.01, 0.1});
      write_text(ev_thresholds, to_json(t).dump(1));
    }
  });

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "Fit score ranges and fusion weights on a training cohort");
  std::string cal_manifest, cal_out = "calibration.json", cal_thr_out = "thresholds.json", cal_far = "0,0.001,0.01,0.1";
  int cal_n = 0;
  std::uint64_t cal_seed = 1;
  unsigned cal_threads = 1;
  bool cal_render = false;
  cal->add_option("--manifest", cal_manifest, "Training cohort manifest");
  cal->add_option("--subjects", cal_n, "Plan and render a training cohort in memory instead");
  cal->add_option("--seed", cal_seed, "Master seed of the in-memory cohort");
  cal->add_flag("--render", cal_render, "Render manifest captures instead of reading files");
  cal->add_option("--calibration-out", cal_out);
  cal->add_option("--thresholds-out", cal_thr_out);
  cal->add_option("--far", cal_far, "FAR points of the threshold table");
  cal->add_option("--threads", cal_threads);
  cal->callback([&] {
    if (cal_manifest.empty() == (cal_n <= 0)) throw Error(ErrorCode::InvalidArgument, "give --manifest or --subjects");
    synth::CohortManifest manifest;
    std::string origin;
    eval::CaptureSource source;
    if (cal_n > 0) {
      manifest = synth::plan_cohort(cal_n, synth::Schedule::standard(), cal_seed);
      source = eval::render_source(manifest);
      origin = "synthetic training cohort, " + std::to_string(cal_n) + " subjects, seed " + std::to_string(cal_seed);
    } else {
      manifest = synth::load_manifest(cal_manifest);
      source = cal_render ? eval::render_source(manifest) : eval::disk_source(fs::path(cal_manifest).parent_path());
      origin = "cohort " + cal_manifest;
    }
    eval::ProtocolSpec protocol;
    auto opts = run_options(cal_threads);
    auto templates = eval::extract_templates(manifest, protocol, source, opts);
    if (templates.failed_captures > 0) {
      std::fprintf(stderr, "%d captures failed extraction, %zu subjects excluded\n", templates.failed_captures,
                   templates.excluded.size());
    }
    auto cube = eval::score_cohort(templates, opts);
    auto fit = eval::fit_calibration(cube, {}, origin);
    write_text(cal_out, fusion::to_json(fit.calibration).dump(1));

    protocol.stacks = {eval::Stack::Fused};
    auto report = eval::evaluate(cube, protocol, eval::Stack::Fused, fit.calibration);
    auto table = eval::export_threshold_table(report, parse_double_list(cal_far));
    write_text(cal_thr_out, to_json(table).dump(1));
    for (const auto& [w, objective] : fit.objective) std::printf("texture weight %.2f: %.4f\n", w, objective);
    std::printf("chose texture weight %.2f over %zu subjects\n",
                fit.calibration.weights.at(fusion::Channel::Texture), cube.size());
  });

  // gallery commands
  std::string gal_path;
  CaptureArgs captures;

  auto* enr = app.add_subcommand("enroll", "Enroll a subject into a gallery file");
  std::string enr_id, enr_meta, enr_cal, enr_thr;
  bool enr_no_dedup = false, enr_override = false;
  double enr_dedup_threshold = -1;
  enr->add_option("--gallery", gal_path)->required();
  enr->add_option("--id", enr_id)->required();
  enr->add_option("--meta", enr_meta, "Subject metadata JSON")->required();
  add_capture_options(enr, captures);
  enr->add_flag("--no-dedup", enr_no_dedup);
  enr->add_flag("--override", enr_override, "Enroll despite potential duplicates");
  enr->add_option("--dedup-threshold", enr_dedup_threshold);
  enr->add_option("--calibration", enr_cal, "Calibration for a new gallery");
  enr->add_option("--thresholds", enr_thr, "Threshold table for a new gallery");
  enr->callback([&] {
    gallery::GalleryConfig config;
    if (!enr_cal.empty()) config.calibration = fusion::load_calibration(enr_cal);
    if (!enr_thr.empty()) config.thresholds = load_threshold_table(enr_thr);
    auto g = gallery::Gallery::open(gal_path, config);
    gallery::GalleryRecord record{enr_id, template_from_files(captures, fusion::Role::Enrollment, enr_id),
                                  gallery::subject_meta_from_json(read_json(enr_meta)), 0};
    gallery::EnrollOptions options;
    options.dedup = !enr_no_dedup;
    options.override_duplicates = enr_override;
    if (enr_dedup_threshold >= 0) options.dedup_threshold = enr_dedup_threshold;
    try {
      auto r = g.enroll(std::move(record), options);
      std::printf("%s\n", json{{"subject_id", r.subject_id}, {"gallery_size", r.gallery_size},
                               {"duplicates", gallery::to_json(r.duplicates)}}.dump(1).c_str());
    } catch (const gallery::PotentialDuplicateFound& e) {
      std::printf("%s\n", json{{"error", "PotentialDuplicateFound"}, {"candidates", gallery::to_json(e.candidates())}}
                              .dump(1)
                              .c_str());
      throw;
    }
  });

  auto* ver = app.add_subcommand("verify", "1:1 verification against an enrolled subject");
  std::string ver_id;
  double ver_far = -1;
  ver->add_option("--gallery", gal_path)->required();
  ver->add_option("--id", ver_id)->required();
  ver->add_option("--far", ver_far, "Target FAR (default: the gallery's)");
  add_capture_options(ver, captures);
  ver->callback([&] {
    auto g = gallery::Gallery::load(gal_path);
    auto v = g.verify(ver_id, template_from_files(captures, fusion::Role::Probe, ver_id),
                      ver_far >= 0 ? std::optional<double>(ver_far) : std::nullopt);
    std::printf("%s\n", json{{"subject_id", ver_id}, {"decision", v.decision}, {"fused", v.score.fused},
                             {"far", v.far}, {"threshold", v.threshold}, {"breakdown", fusion::to_json(v.score)}}
                            .dump(1)
                            .c_str());
  });

  auto* idf = app.add_subcommand("identify", "1:N search of a gallery");
  std::size_t idf_k = 5;
  long idf_shortlist = -1;
  idf->add_option("--gallery", gal_path)->required();
  idf->add_option("-k", idf_k)->check(CLI::PositiveNumber);
  idf->add_option("--shortlist", idf_shortlist, "Texture shortlist size (0: whole gallery)");
  add_capture_options(idf, captures);
  idf->callback([&] {
    auto g = gallery::Gallery::load(gal_path);
    auto hits = g.identify(template_from_files(captures, fusion::Role::Probe, "probe"), idf_k,
                           idf_shortlist >= 0 ? std::optional<std::size_t>(idf_shortlist) : std::nullopt);
    std::printf("%s\n", gallery::to_json(hits).dump(1).c_str());
  });

  auto* srv = app.add_subcommand("serve", "Run the HTTP API");
  std::string srv_config;
  srv->add_option("--config", srv_config, "api.json")->required();
  srv->callback([&] {
    service::Server server(service::load_api_config(srv_config));
    const int port = server.bind();
    std::fprintf(stderr, "listening on %s:%d (%zu subjects)\n", server.config().bind_address.c_str(), port,
                 server.gallery().size());
    server.listen();
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
