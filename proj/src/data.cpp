#include "sbsg/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "sbsg/errors.hpp"

namespace sbsg {

const std::vector<std::string>& Vocabulary::reserved_tokens() {
  static const std::vector<std::string> kReserved = {"<pad>", "<eos>", "<unk>", "<l2r>", "<r2l>", "<null>"};
  return kReserved;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& reserved = reserved_tokens();
  if (tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
    throw VocabError("vocabulary must start with the reserved tokens <pad> <eos> <unk> <l2r> <r2l> <null>");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw VocabError("empty token at id " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw VocabError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open vocabulary '" + path.string() + "'");
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& t : tokens_) os << t << '\n';
  if (!os) throw IoError("failed writing vocabulary '" + path.string() + "'");
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const int> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(token(id));
  return out;
}

Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus, std::size_t max_size) {
  const auto& reserved = Vocabulary::reserved_tokens();
  if (max_size <= reserved.size()) {
    throw ConfigError("vocabulary size must exceed the " + std::to_string(reserved.size()) + " reserved tokens");
  }
  std::map<std::string, std::size_t> counts;
  std::size_t total = 0;
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) {
      ++total;
      if (std::find(reserved.begin(), reserved.end(), tok) == reserved.end()) ++counts[tok];
    }
  }
  if (total == 0) throw InputError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // std::map iteration is lexicographic, so a stable sort keeps ties ordered.
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = reserved;
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= max_size) break;
    tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

namespace {

void check_target(std::span<const int> y) {
  if (y.empty()) throw InputError("cannot split an empty target");
  for (int id : y) {
    if (id < 0) throw InputError("negative token id in target");
    // <unk> is how out-of-vocabulary target words are encoded, so it passes.
    if (is_reserved(id) && id != kUnkId) {
      throw InputError("target contains reserved token id " + std::to_string(id));
    }
  }
}

}  // namespace

BidirectionalTarget split_target(std::span<const int> y, NullSide odd_side) {
  check_target(y);
  const std::size_t n = y.size();
  BidirectionalTarget t;
  std::size_t fwd_count = n / 2;  // tokens taken from the left
  if (n % 2 == 1) {
    if (odd_side == NullSide::kNone) throw ContractError("odd-length target needs a <null> side");
    t.null_side = odd_side;
    fwd_count = odd_side == NullSide::kFwd ? (n - 1) / 2 : (n + 1) / 2;
  }
  t.fwd.push_back(kL2RId);
  t.fwd.insert(t.fwd.end(), y.begin(), y.begin() + static_cast<std::ptrdiff_t>(fwd_count));
  if (t.null_side == NullSide::kFwd) t.fwd.push_back(kNullId);
  t.fwd.push_back(kEosId);

  t.bwd.push_back(kR2LId);
  for (std::size_t i = n; i-- > fwd_count;) t.bwd.push_back(y[i]);
  if (t.null_side == NullSide::kBwd) t.bwd.push_back(kNullId);
  t.bwd.push_back(kEosId);
  return t;
}

BidirectionalTarget split_target(std::span<const int> y, Rng& rng) {
  if (y.size() % 2 == 0) return split_target(y, NullSide::kNone);
  return split_target(y, (rng() >> 63) == 0 ? NullSide::kFwd : NullSide::kBwd);
}

std::vector<int> stitch(std::span<const int> fwd, std::span<const int> bwd) {
  auto keep = [](int id) { return id != kL2RId && id != kR2LId && id != kPadId && id != kNullId; };
  std::vector<int> out;
  for (int id : fwd) {
    if (id == kEosId) break;
    if (keep(id)) out.push_back(id);
  }
  std::vector<int> tail;
  for (int id : bwd) {
    if (id == kEosId) break;
    if (keep(id)) tail.push_back(id);
  }
  out.insert(out.end(), tail.rbegin(), tail.rend());
  return out;
}

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset '" + path.string() + "'");
  Dataset data;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": expected 'source<TAB>target'");
    }
    Example ex{tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1))};
    if (ex.src.empty() || ex.tgt.empty()) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": empty source or target");
    }
    data.push_back(std::move(ex));
  }
  return data;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& ex : data) os << join_tokens(ex.src) << '\t' << join_tokens(ex.tgt) << '\n';
  if (!os) throw IoError("failed writing dataset '" + path.string() + "'");
}

namespace {

IdMatrix pad_rows(const std::vector<std::vector<int>>& rows) {
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  IdMatrix m{rows.size(), cols, std::vector<int>(rows.size() * cols, kPadId)};
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.ids.begin() + static_cast<std::ptrdiff_t>(i * cols));
  return m;
}

// Fills *_in / *_out of one stream from full sequences (start ... <eos>).
void shift_stream(const std::vector<std::vector<int>>& seqs, IdMatrix& in, IdMatrix& out) {
  std::vector<std::vector<int>> ins, outs;
  for (const auto& s : seqs) {
    ins.emplace_back(s.begin(), s.end() - 1);
    outs.emplace_back(s.begin() + 1, s.end());
  }
  in = pad_rows(ins);
  out = pad_rows(outs);
}

void fill_common(Batch& batch, std::span<const std::vector<int>> sources, const std::vector<std::vector<int>>& fwd) {
  std::vector<std::vector<int>> src(sources.begin(), sources.end());
  for (const auto& s : src) {
    if (s.empty()) throw InputError("empty source sequence in batch");
    batch.src_lengths.push_back(s.size());
  }
  batch.src = pad_rows(src);
  const std::size_t q = batch.fwd_in.cols;
  batch.loss_mask.assign(batch.size() * q, 0);
  for (std::size_t i = 0; i < fwd.size(); ++i) {
    const std::size_t len = fwd[i].size() - 1;
    batch.tgt_lengths.push_back(len);
    for (std::size_t j = 0; j < len; ++j) batch.loss_mask[i * q + j] = 1;
  }
}

}  // namespace

Batch make_batch(std::span<const EncodedPair> pairs) {
  if (pairs.empty()) throw ContractError("cannot batch zero examples");
  std::vector<std::vector<int>> sources, fwd, bwd;
  for (const auto& p : pairs) {
    if (p.tgt.fwd.size() != p.tgt.bwd.size() || p.tgt.fwd.size() < 2) {
      throw ContractError("bidirectional target halves must have equal length >= 2");
    }
    sources.push_back(p.src);
    fwd.push_back(p.tgt.fwd);
    bwd.push_back(p.tgt.bwd);
  }
  Batch batch;
  shift_stream(fwd, batch.fwd_in, batch.fwd_out);
  shift_stream(bwd, batch.bwd_in, batch.bwd_out);
  fill_common(batch, sources, fwd);
  return batch;
}

Batch make_unidirectional_batch(std::span<const std::vector<int>> sources, std::span<const std::vector<int>> targets,
                                DecoderMode direction) {
  if (sources.empty() || sources.size() != targets.size()) {
    throw ContractError("unidirectional batch needs equal, non-zero numbers of sources and targets");
  }
  if (direction == DecoderMode::kBidirectional) throw ContractError("unidirectional batch needs l2r or r2l");
  std::vector<std::vector<int>> seqs;
  for (const auto& t : targets) {
    check_target(t);
    std::vector<int> s{direction == DecoderMode::kL2R ? kL2RId : kR2LId};
    if (direction == DecoderMode::kL2R) {
      s.insert(s.end(), t.begin(), t.end());
    } else {
      s.insert(s.end(), t.rbegin(), t.rend());
    }
    s.push_back(kEosId);
    seqs.push_back(std::move(s));
  }
  Batch batch;
  shift_stream(seqs, batch.fwd_in, batch.fwd_out);
  fill_common(batch, sources, seqs);
  return batch;
}

std::string to_string(SynthTask task) {
  switch (task) {
    case SynthTask::kCopy: return "copy";
    case SynthTask::kReverse: return "reverse";
    case SynthTask::kSort: return "sort";
  }
  return "unknown";
}

SynthTask parse_synth_task(const std::string& text) {
  if (text == "copy") return SynthTask::kCopy;
  if (text == "reverse") return SynthTask::kReverse;
  if (text == "sort") return SynthTask::kSort;
  throw ConfigError("unknown task '" + text + "' (expected copy, reverse or sort)");
}

Dataset synth_generate(SynthTask task, std::size_t count, std::size_t min_len, std::size_t max_len,
                       std::size_t vocab_real_size, std::uint64_t seed, std::size_t max_positions) {
  if (min_len < 1 || min_len > max_len || max_positions < 3 || max_len > max_positions - 2) {
    throw ConfigError("length range [" + std::to_string(min_len) + ", " + std::to_string(max_len) +
                      "] must lie within [1, max_positions-2=" +
                      std::to_string(max_positions < 2 ? 0 : max_positions - 2) + "]");
  }
  if (vocab_real_size == 0) throw ConfigError("synthetic vocabulary needs at least one token");
  Rng rng(seed);
  Dataset data;
  data.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t len = min_len + static_cast<std::size_t>(rng() % (max_len - min_len + 1));
    std::vector<std::size_t> values(len);
    for (auto& v : values) v = static_cast<std::size_t>(rng() % vocab_real_size);
    std::vector<std::size_t> target = values;
    if (task == SynthTask::kReverse) std::reverse(target.begin(), target.end());
    if (task == SynthTask::kSort) std::sort(target.begin(), target.end());
    Example ex;
    for (auto v : values) ex.src.push_back(std::to_string(v));
    for (auto v : target) ex.tgt.push_back(std::to_string(v));
    data.push_back(std::move(ex));
  }
  return data;
}

}  // namespace sbsg
