#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dkgen/numerics.hpp"

namespace dkgen {

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t hidden_dim = 64;
    std::size_t num_encoder_layers = 2;
    std::size_t num_decoder_layers = 2;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t max_positions = 256;
    double dropout = 0.1;
    double alpha = 0.5;   // loss mix weight
    double gamma = 0.8;   // selection threshold (ratio of 2nd to 1st score)

    void validate() const;
};

// Encoder output for one sequence. `pooled` is the hidden state at the
// sequence's [EOS] position (the last unpadded token).
struct EncodedSequence {
    Tensor hidden;                // [len x d]
    Tensor pooled;                // [1 x d]
    std::vector<uint8_t> mask;    // 1 = real token, 0 = padding
    std::size_t unpadded_len = 0;
};

// Concatenated decoder memory: context block first (when present), then one
// block per passage. `offsets` has one boundary per block edge, starting at 0.
struct Memory {
    Tensor states;                       // [total x d]
    std::vector<std::size_t> offsets;    // size = blocks + 1
    std::vector<std::size_t> unpadded;   // unpadded length per block
    std::vector<uint8_t> keep;           // per-position key mask
    bool has_context = false;

    std::size_t num_blocks() const { return offsets.size() - 1; }
    std::size_t num_passages() const { return num_blocks() - (has_context ? 1 : 0); }
    std::size_t total_len() const { return offsets.back(); }
};

Memory concat_memory(const EncodedSequence* context,
                     const std::vector<EncodedSequence>& passages);

// Post-softmax cross-attention weights captured during decoding, one
// [out_len x mem_len] tensor per (layer, head).
struct CrossAttentionRecord {
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::size_t out_len = 0;
    std::size_t mem_len = 0;
    std::vector<Tensor> weights;  // layer-major, layers*heads entries

    const Tensor& at(std::size_t layer, std::size_t head) const {
        return weights.at(layer * heads + head);
    }
};

struct DecodeResult {
    Tensor logits;  // [prefix_len x vocab]
    CrossAttentionRecord attn;
};

// Per-passage pooled cross-attention: mean over layers, heads, decoded steps
// and unpadded passage tokens; the context block is excluded. Raw (pre-softmax)
// scalars, one per passage, gradient-tracked.
Tensor extract_passage_attention(const CrossAttentionRecord& record,
                                 const Memory& memory);

// Miniature pre-LN transformer encoder-decoder with an MLP scoring head.
class TransformerModel {
  public:
    TransformerModel(ModelConfig config, Rng& init_rng);

    const ModelConfig& config() const { return config_; }
    ParamMap& params() { return params_; }
    const ParamMap& params() const { return params_; }

    // Bidirectional encoder; pass `dropout_rng` to enable training dropout.
    EncodedSequence encode(const std::vector<int>& ids,
                           Rng* dropout_rng = nullptr) const;
    EncodedSequence encode(const std::vector<int>& ids,
                           const std::vector<uint8_t>& mask,
                           Rng* dropout_rng = nullptr) const;

    // Causal decoder over the prefix, cross-attending over the full memory.
    DecodeResult decode(const std::vector<int>& prefix_ids, const Memory& memory,
                        Rng* dropout_rng = nullptr) const;
    // Next-token logits for the last prefix position.
    std::pair<Tensor, CrossAttentionRecord> decode_step(
        const std::vector<int>& prefix_ids, const Memory& memory) const;

    // Two-layer MLP (d -> d -> 1) over a pooled representation; raw score.
    Tensor score_head(const Tensor& pooled) const;

    void save_checkpoint(const std::string& path) const;
    static TransformerModel load_checkpoint(const std::string& path);

  private:
    explicit TransformerModel(ModelConfig config);  // uninitialized params
    ModelConfig config_;
    ParamMap params_;

    const Tensor& p(const std::string& name) const;
    Tensor encoder_stack(const std::vector<int>& ids,
                         const std::vector<uint8_t>& mask, Rng* rng) const;
    Tensor maybe_dropout(const Tensor& t, Rng* rng) const;
};

}  // namespace dkgen
