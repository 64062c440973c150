#include "dkgen/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "dkgen/binio.hpp"
#include "dkgen/tokenizer.hpp"

namespace dkgen {

namespace {

constexpr char kMagic[4] = {'D', 'K', 'G', 'N'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr double kInitStd = 0.06;

// keep[i, j] = kv_mask[j] && (!causal || j <= i)
std::vector<uint8_t> make_keep(std::size_t rows, const std::vector<uint8_t>& kv_mask,
                               bool causal) {
    const std::size_t cols = kv_mask.size();
    std::vector<uint8_t> keep(rows * cols, 0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            keep[i * cols + j] = kv_mask[j] && (!causal || j <= i);
        }
    }
    return keep;
}

struct AttnParamRefs {
    const Tensor &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo;
};

Tensor multihead_attention(const Tensor& x_q, const Tensor& x_kv,
                           const AttnParamRefs& p, std::size_t heads,
                           const std::vector<uint8_t>& keep,
                           std::vector<Tensor>* record) {
    const std::size_t d = x_q.dim(1);
    const std::size_t dh = d / heads;
    const Tensor q = linear(x_q, p.wq, p.bq);
    const Tensor k = linear(x_kv, p.wk, p.bk);
    const Tensor v = linear(x_kv, p.wv, p.bv);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
        const Tensor attn = softmax_masked(scores, keep);
        if (record) record->push_back(attn);
        ctx.push_back(matmul(attn, vh));
    }
    return linear(concat_cols(ctx), p.wo, p.bo);
}

void add_linear_params(ParamMap& m, const std::string& prefix, std::size_t in,
                       std::size_t out, Rng* rng) {
    std::vector<double> w(in * out, 0.0);
    if (rng) {
        for (double& v : w) v = rng->normal(0.0, kInitStd);
    }
    m[prefix + ".w"] = Tensor::from({in, out}, std::move(w), true);
    m[prefix + ".b"] = Tensor::zeros({out}, true);
}

void add_ln_params(ParamMap& m, const std::string& prefix, std::size_t d) {
    m[prefix + ".g"] = Tensor::full({d}, 1.0, true);
    m[prefix + ".b"] = Tensor::zeros({d}, true);
}

void add_attn_params(ParamMap& m, const std::string& prefix, std::size_t d, Rng* rng) {
    add_linear_params(m, prefix + ".q", d, d, rng);
    add_linear_params(m, prefix + ".k", d, d, rng);
    add_linear_params(m, prefix + ".v", d, d, rng);
    add_linear_params(m, prefix + ".o", d, d, rng);
}

ParamMap make_params(const ModelConfig& cfg, Rng* rng) {
    ParamMap m;
    const std::size_t d = cfg.hidden_dim;
    {
        std::vector<double> e(cfg.vocab_size * d, 0.0);
        if (rng) {
            for (double& v : e) v = rng->normal(0.0, kInitStd);
        }
        m["emb.tok"] = Tensor::from({cfg.vocab_size, d}, std::move(e), true);
    }
    {
        std::vector<double> e(cfg.max_positions * d, 0.0);
        if (rng) {
            for (double& v : e) v = rng->normal(0.0, kInitStd);
        }
        m["emb.pos"] = Tensor::from({cfg.max_positions, d}, std::move(e), true);
    }
    for (std::size_t l = 0; l < cfg.num_encoder_layers; ++l) {
        const std::string pre = "enc." + std::to_string(l);
        add_ln_params(m, pre + ".ln1", d);
        add_attn_params(m, pre + ".attn", d, rng);
        add_ln_params(m, pre + ".ln2", d);
        add_linear_params(m, pre + ".ffn.1", d, cfg.ffn_dim, rng);
        add_linear_params(m, pre + ".ffn.2", cfg.ffn_dim, d, rng);
    }
    add_ln_params(m, "enc.lnf", d);
    for (std::size_t l = 0; l < cfg.num_decoder_layers; ++l) {
        const std::string pre = "dec." + std::to_string(l);
        add_ln_params(m, pre + ".ln1", d);
        add_attn_params(m, pre + ".self", d, rng);
        add_ln_params(m, pre + ".ln2", d);
        add_attn_params(m, pre + ".cross", d, rng);
        add_ln_params(m, pre + ".ln3", d);
        add_linear_params(m, pre + ".ffn.1", d, cfg.ffn_dim, rng);
        add_linear_params(m, pre + ".ffn.2", cfg.ffn_dim, d, rng);
    }
    add_ln_params(m, "dec.lnf", d);
    add_linear_params(m, "out", d, cfg.vocab_size, rng);
    add_linear_params(m, "score.1", d, d, rng);
    add_linear_params(m, "score.2", d, 1, rng);
    return m;
}

}  // namespace

void ModelConfig::validate() const {
    if (vocab_size < Vocabulary::kNumSpecials) {
        throw DataError("model config: vocab_size too small");
    }
    if (hidden_dim == 0 || num_encoder_layers == 0 || num_decoder_layers == 0 ||
        num_heads == 0 || ffn_dim == 0 || max_positions == 0) {
        throw DataError("model config: all extents must be >= 1");
    }
    if (hidden_dim % num_heads != 0) {
        throw DataError("model config: hidden_dim must be divisible by num_heads");
    }
    if (alpha < 0.0 || alpha > 1.0) throw DataError("model config: alpha outside [0,1]");
    if (gamma <= 0.0 || gamma > 1.0) throw DataError("model config: gamma outside (0,1]");
    if (dropout < 0.0 || dropout >= 1.0) throw DataError("model config: bad dropout");
}

TransformerModel::TransformerModel(ModelConfig config) : config_(std::move(config)) {
    config_.validate();
}

TransformerModel::TransformerModel(ModelConfig config, Rng& init_rng)
    : TransformerModel(std::move(config)) {
    params_ = make_params(config_, &init_rng);
}

const Tensor& TransformerModel::p(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("model: unknown parameter '" + name + "'");
    return it->second;
}

Tensor TransformerModel::maybe_dropout(const Tensor& t, Rng* rng) const {
    if (!rng || config_.dropout == 0.0) return t;
    return dropout(t, config_.dropout, *rng);
}

Tensor TransformerModel::encoder_stack(const std::vector<int>& ids,
                                       const std::vector<uint8_t>& mask,
                                       Rng* rng) const {
    const std::size_t len = ids.size();
    std::vector<int> pos(len);
    std::iota(pos.begin(), pos.end(), 0);
    Tensor h = add(embedding_lookup(p("emb.tok"), ids),
                   embedding_lookup(p("emb.pos"), pos));
    h = maybe_dropout(h, rng);
    const auto keep = make_keep(len, mask, /*causal=*/false);
    for (std::size_t l = 0; l < config_.num_encoder_layers; ++l) {
        const std::string pre = "enc." + std::to_string(l);
        const Tensor x1 = layer_norm(h, p(pre + ".ln1.g"), p(pre + ".ln1.b"));
        AttnParamRefs ap{p(pre + ".attn.q.w"), p(pre + ".attn.q.b"),
                         p(pre + ".attn.k.w"), p(pre + ".attn.k.b"),
                         p(pre + ".attn.v.w"), p(pre + ".attn.v.b"),
                         p(pre + ".attn.o.w"), p(pre + ".attn.o.b")};
        h = add(h, maybe_dropout(
                       multihead_attention(x1, x1, ap, config_.num_heads, keep, nullptr),
                       rng));
        const Tensor x2 = layer_norm(h, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
        const Tensor f = linear(gelu(linear(x2, p(pre + ".ffn.1.w"), p(pre + ".ffn.1.b"))),
                                p(pre + ".ffn.2.w"), p(pre + ".ffn.2.b"));
        h = add(h, maybe_dropout(f, rng));
    }
    return layer_norm(h, p("enc.lnf.g"), p("enc.lnf.b"));
}

EncodedSequence TransformerModel::encode(const std::vector<int>& ids,
                                         Rng* dropout_rng) const {
    std::vector<uint8_t> mask(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        mask[i] = ids[i] != Vocabulary::kPad;
    }
    return encode(ids, mask, dropout_rng);
}

EncodedSequence TransformerModel::encode(const std::vector<int>& ids,
                                         const std::vector<uint8_t>& mask,
                                         Rng* dropout_rng) const {
    if (ids.empty()) throw ShapeError("encode: empty id sequence");
    if (ids.size() > config_.max_positions) {
        throw Error("encode: sequence length " + std::to_string(ids.size()) +
                    " exceeds max positions " + std::to_string(config_.max_positions));
    }
    if (mask.size() != ids.size()) throw ShapeError("encode: mask length mismatch");
    std::size_t unpadded = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) unpadded = i + 1;
    }
    if (unpadded == 0) throw Error("encode: fully padded sequence");
    EncodedSequence out;
    out.hidden = encoder_stack(ids, mask, dropout_rng);
    out.pooled = slice_rows(out.hidden, unpadded - 1, unpadded);
    out.mask = mask;
    out.unpadded_len = unpadded;
    return out;
}

Memory concat_memory(const EncodedSequence* context,
                     const std::vector<EncodedSequence>& passages) {
    Memory mem;
    std::vector<Tensor> blocks;
    mem.offsets.push_back(0);
    auto push_block = [&](const EncodedSequence& seq) {
        blocks.push_back(seq.hidden);
        mem.offsets.push_back(mem.offsets.back() + seq.hidden.dim(0));
        mem.unpadded.push_back(seq.unpadded_len);
        mem.keep.insert(mem.keep.end(), seq.mask.begin(), seq.mask.end());
    };
    if (context) {
        mem.has_context = true;
        push_block(*context);
    }
    for (const auto& seq : passages) push_block(seq);
    if (blocks.empty()) throw ShapeError("concat_memory: no blocks");
    mem.states = blocks.size() == 1 ? blocks[0] : concat_rows(blocks);
    return mem;
}

DecodeResult TransformerModel::decode(const std::vector<int>& prefix_ids,
                                      const Memory& memory, Rng* dropout_rng) const {
    if (prefix_ids.empty()) throw Error("decode: empty prefix");
    if (prefix_ids.size() > config_.max_positions) {
        throw Error("decode: prefix length " + std::to_string(prefix_ids.size()) +
                    " exceeds max positions " + std::to_string(config_.max_positions));
    }
    const std::size_t len = prefix_ids.size();
    const std::size_t mem_len = memory.total_len();
    std::vector<int> pos(len);
    std::iota(pos.begin(), pos.end(), 0);
    Tensor h = add(embedding_lookup(p("emb.tok"), prefix_ids),
                   embedding_lookup(p("emb.pos"), pos));
    h = maybe_dropout(h, dropout_rng);
    const auto self_keep = make_keep(len, std::vector<uint8_t>(len, 1), /*causal=*/true);
    std::vector<uint8_t> cross_keep;
    cross_keep.reserve(len * mem_len);
    for (std::size_t i = 0; i < len; ++i) {
        cross_keep.insert(cross_keep.end(), memory.keep.begin(), memory.keep.end());
    }
    DecodeResult res;
    res.attn.layers = config_.num_decoder_layers;
    res.attn.heads = config_.num_heads;
    res.attn.out_len = len;
    res.attn.mem_len = mem_len;
    for (std::size_t l = 0; l < config_.num_decoder_layers; ++l) {
        const std::string pre = "dec." + std::to_string(l);
        const Tensor x1 = layer_norm(h, p(pre + ".ln1.g"), p(pre + ".ln1.b"));
        AttnParamRefs sp{p(pre + ".self.q.w"), p(pre + ".self.q.b"),
                         p(pre + ".self.k.w"), p(pre + ".self.k.b"),
                         p(pre + ".self.v.w"), p(pre + ".self.v.b"),
                         p(pre + ".self.o.w"), p(pre + ".self.o.b")};
        h = add(h, maybe_dropout(multihead_attention(x1, x1, sp, config_.num_heads,
                                                     self_keep, nullptr),
                                 dropout_rng));
        const Tensor x2 = layer_norm(h, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
        AttnParamRefs cp{p(pre + ".cross.q.w"), p(pre + ".cross.q.b"),
                         p(pre + ".cross.k.w"), p(pre + ".cross.k.b"),
                         p(pre + ".cross.v.w"), p(pre + ".cross.v.b"),
                         p(pre + ".cross.o.w"), p(pre + ".cross.o.b")};
        h = add(h, maybe_dropout(
                       multihead_attention(x2, memory.states, cp, config_.num_heads,
                                           cross_keep, &res.attn.weights),
                       dropout_rng));
        const Tensor x3 = layer_norm(h, p(pre + ".ln3.g"), p(pre + ".ln3.b"));
        const Tensor f = linear(gelu(linear(x3, p(pre + ".ffn.1.w"), p(pre + ".ffn.1.b"))),
                                p(pre + ".ffn.2.w"), p(pre + ".ffn.2.b"));
        h = add(h, maybe_dropout(f, dropout_rng));
    }
    h = layer_norm(h, p("dec.lnf.g"), p("dec.lnf.b"));
    res.logits = linear(h, p("out.w"), p("out.b"));
    return res;
}

std::pair<Tensor, CrossAttentionRecord> TransformerModel::decode_step(
    const std::vector<int>& prefix_ids, const Memory& memory) const {
    DecodeResult res = decode(prefix_ids, memory);
    Tensor last = slice_rows(res.logits, prefix_ids.size() - 1, prefix_ids.size());
    return {reshape(last, {config_.vocab_size}), std::move(res.attn)};
}

Tensor TransformerModel::score_head(const Tensor& pooled) const {
    if (pooled.rank() != 2 || pooled.dim(1) != config_.hidden_dim) {
        throw ShapeError("score_head: expected [1x" + std::to_string(config_.hidden_dim) +
                         "], got " + shape_str(pooled.shape()));
    }
    const Tensor h = gelu(linear(pooled, p("score.1.w"), p("score.1.b")));
    return reshape(linear(h, p("score.2.w"), p("score.2.b")), {1});
}

Tensor extract_passage_attention(const CrossAttentionRecord& record,
                                 const Memory& memory) {
    if (record.out_len == 0 || record.weights.empty()) {
        throw Error("extract_passage_attention: zero decoded tokens");
    }
    const std::size_t j = memory.num_passages();
    if (j == 0) throw Error("extract_passage_attention: memory has no passages");
    const std::size_t first_block = memory.has_context ? 1 : 0;
    std::vector<Tensor> per_passage;
    per_passage.reserve(j);
    for (std::size_t s = 0; s < j; ++s) {
        const std::size_t block = first_block + s;
        const std::size_t begin = memory.offsets[block];
        const std::size_t width = memory.unpadded[block];
        std::vector<Tensor> block_means;
        block_means.reserve(record.weights.size());
        for (const Tensor& attn : record.weights) {
            block_means.push_back(mean(slice_cols(attn, begin, begin + width)));
        }
        per_passage.push_back(mean(stack_scalars(block_means)));
    }
    return stack_scalars(per_passage);
}

void TransformerModel::save_checkpoint(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot write " + path);
    out.write(kMagic, 4);
    binio::write_le<std::uint32_t>(out, kFormatVersion);
    binio::write_le<std::uint64_t>(out, config_.vocab_size);
    binio::write_le<std::uint64_t>(out, config_.hidden_dim);
    binio::write_le<std::uint64_t>(out, config_.num_encoder_layers);
    binio::write_le<std::uint64_t>(out, config_.num_decoder_layers);
    binio::write_le<std::uint64_t>(out, config_.num_heads);
    binio::write_le<std::uint64_t>(out, config_.ffn_dim);
    binio::write_le<std::uint64_t>(out, config_.max_positions);
    binio::write_le<double>(out, config_.dropout);
    binio::write_le<double>(out, config_.alpha);
    binio::write_le<double>(out, config_.gamma);
    binio::write_le<std::uint64_t>(out, params_.size());
    for (const auto& [name, t] : params_) {
        binio::write_string(out, name);
        binio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) binio::write_le<std::uint64_t>(out, d);
        for (double v : t.data()) binio::write_le<double>(out, v);
    }
}

TransformerModel TransformerModel::load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("checkpoint: bad magic in " + path);
    }
    const auto version = binio::read_le<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    }
    ModelConfig cfg;
    cfg.vocab_size = binio::read_le<std::uint64_t>(in);
    cfg.hidden_dim = binio::read_le<std::uint64_t>(in);
    cfg.num_encoder_layers = binio::read_le<std::uint64_t>(in);
    cfg.num_decoder_layers = binio::read_le<std::uint64_t>(in);
    cfg.num_heads = binio::read_le<std::uint64_t>(in);
    cfg.ffn_dim = binio::read_le<std::uint64_t>(in);
    cfg.max_positions = binio::read_le<std::uint64_t>(in);
    cfg.dropout = binio::read_le<double>(in);
    cfg.alpha = binio::read_le<double>(in);
    cfg.gamma = binio::read_le<double>(in);
    TransformerModel model(cfg);
    ParamMap expected = make_params(cfg, nullptr);
    const auto count = binio::read_le<std::uint64_t>(in);
    if (count != expected.size()) {
        throw IoError("checkpoint: expected " + std::to_string(expected.size()) +
                      " tensors, file has " + std::to_string(count));
    }
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = binio::read_string(in);
        auto it = expected.find(name);
        if (it == expected.end()) {
            throw IoError("checkpoint: unknown tensor '" + name + "'");
        }
        const auto ndim = binio::read_le<std::uint32_t>(in);
        Shape shape(ndim);
        for (auto& d : shape) d = binio::read_le<std::uint64_t>(in);
        if (shape != it->second.shape()) {
            throw IoError("checkpoint: tensor '" + name + "' has shape " +
                          shape_str(shape) + ", expected " +
                          shape_str(it->second.shape()));
        }
        auto data = it->second.mutable_data();
        for (double& v : data) v = binio::read_le<double>(in);
    }
    model.params_ = std::move(expected);
    return model;
}

}  // namespace dkgen
