#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "autoadr/graph.hpp"
#include "autoadr/search_space.hpp"
#include "autoadr/tokenizer.hpp"

namespace autoadr {

enum class Side { kQuery, kAd };

std::size_t max_words(const ModelDims& dims, Side side);

// Per-forward switches. Dropout is applied to the initial-convolution output
// of each tower and to the first hidden layer of the head when training.
struct ForwardContext {
  bool training = false;
  double keep_prob = 1.0;
  Rng* rng = nullptr;
};

// x = [q, a, |q - a|, q * a] along the last axis.
Var crossing_features(Var q, Var a);

// Twin-tower relevance model. A model built without a genome is a supernet:
// every (layer, op) slot of both towers exists and any genome can be run.
// A model built for a genome owns only that genome's slots.
class RelevanceModel {
 public:
  RelevanceModel(TriLetterVocab vocab, const ModelDims& dims,
                 std::optional<ArchitectureGenome> genome, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  const TriLetterVocab& vocab() const { return vocab_; }
  bool is_supernet() const { return !genome_.has_value(); }
  // Fixed genome; throws for a supernet.
  const ArchitectureGenome& genome() const;

  EncodedText encode_text(std::string_view text, Side side) const;

  // Tri-letter sums plus position rows, padded to the longest text in the
  // batch; masked positions are zero.
  SequenceBatch embed(Graph& g, std::span<const EncodedText> texts, Side side);
  // Pointwise emb_dim -> hidden map.
  SequenceBatch initial_conv(Graph& g, const SequenceBatch& x);
  // Tower encoding followed by the downscale layer: [B, rep_dim].
  Var represent(Graph& g, const ArchitectureGenome& genome, std::span<const EncodedText> texts,
                Side side, const ForwardContext& ctx);
  // MLP head over crossing features; returns logits [B].
  Var head(Graph& g, Var q, Var a, const ForwardContext& ctx);
  // Sigmoid relevance probabilities [B] for aligned query/ad lists.
  Var forward(Graph& g, const ArchitectureGenome& genome, std::span<const EncodedText> queries,
              std::span<const EncodedText> ads, const ForwardContext& ctx);

  std::vector<Parameter*> fixed_parameters();
  std::vector<Parameter*> parameters_for(const ArchitectureGenome& genome);
  std::vector<Parameter*> all_parameters();
  std::int64_t parameter_count(const ArchitectureGenome& genome);

  TowerStore& tower(Side side) { return side == Side::kQuery ? query_tower_ : ad_tower_; }

  // Parameter values plus batchnorm running statistics, keyed by name.
  std::map<std::string, Tensor> state() const;
  // Restores every tensor of state(); names and shapes must match exactly.
  void load_state(const std::map<std::string, Tensor>& tensors);

 private:
  struct Fixed {
    Parameter token_table, query_positions, ad_positions;
    Parameter init_w, init_b;
    Parameter down_query_w, down_query_b, down_ad_w, down_ad_b;
    Parameter mlp_w1, mlp_b1, mlp_w2, mlp_b2, shortcut_w, out_w, out_b;
  };

  std::vector<Parameter*> fixed_list();

  TriLetterVocab vocab_;
  ModelDims dims_;
  std::optional<ArchitectureGenome> genome_;
  Fixed fixed_;
  TowerStore query_tower_;
  TowerStore ad_tower_;
};

// Eval-mode probabilities for aligned text pairs, computed in batches.
std::vector<double> score_pairs(RelevanceModel& model, const ArchitectureGenome& genome,
                                std::span<const std::string> queries,
                                std::span<const std::string> ads, std::size_t batch_size = 256);

// Eval-mode ad-side representations, one row of rep_dim values per text.
std::vector<std::vector<double>> precompute_side(RelevanceModel& model,
                                                 const ArchitectureGenome& genome,
                                                 std::span<const std::string> texts, Side side,
                                                 std::size_t batch_size = 256);

// Eval-mode probabilities from precomputed representations.
std::vector<double> score_representations(RelevanceModel& model,
                                          std::span<const std::vector<double>> queries,
                                          std::span<const std::vector<double>> ads);

// Export directory: model.ckpt (state()), genome.txt, vocab.txt and
// dims.json. A supernet exports without genome.txt.
void export_model(const RelevanceModel& model, const std::filesystem::path& dir);
RelevanceModel import_model(const std::filesystem::path& dir);

}  // namespace autoadr
