#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrlab/common.hpp"
#include "ctrlab/tensor.hpp"

namespace ctrlab::catalog {

struct CatalogConfig {
    int vocab = 64;        // token vocabulary V, shared with descriptions
    int categories = 8;    // K
    int image_dim = 16;    // d_f
    int context_dim = 16;  // d_c
    int title_min = 3;
    int title_max = 6;
    static constexpr int num_attrs = 4;
};

/// Symbolic multimodal product record: transparent-background image as a
/// feature vector plus tokenized attributes.
struct Product {
    int id = 0;
    int category = 0;
    std::vector<int> title;             // length in [title_min, title_max], tokens in [0, V)
    std::array<double, 4> attrs{};      // price-like, rating-like, two misc
    Tensor image_feature;               // [image_dim]
};

/// Deterministic synthetic catalog. Categories are balanced to within one
/// product via a shuffled round-robin; titles are unique across the catalog
/// so attribute serializations cannot collide.
inline std::vector<Product> generate_catalog(std::uint64_t seed, int count, const CatalogConfig& cfg) {
    if (count < 1 || cfg.categories < 1) {
        throw ConfigError("generate_catalog: count and categories must be positive");
    }
    std::vector<int> cats;
    cats.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        cats.push_back(i % cfg.categories);
    }
    rng::Stream cat_stream(rng::derive(seed, "catalog/categories"));
    cat_stream.shuffle(cats);

    std::vector<Product> products;
    products.reserve(static_cast<std::size_t>(count));
    std::set<std::vector<int>> seen_titles;
    for (int id = 0; id < count; ++id) {
        rng::Stream s(rng::derive(seed, "catalog/product", {static_cast<std::uint64_t>(id)}));
        Product p;
        p.id = id;
        p.category = cats[static_cast<std::size_t>(id)];
        for (;;) {
            int len = s.range(cfg.title_min, cfg.title_max);
            std::vector<int> title(static_cast<std::size_t>(len));
            for (int& t : title) {
                t = static_cast<int>(s.below(static_cast<std::uint64_t>(cfg.vocab)));
            }
            if (seen_titles.insert(title).second) {
                p.title = std::move(title);
                break;
            }
        }
        p.attrs[0] = s.uniform(1.0, 100.0);  // price-like
        p.attrs[1] = s.uniform(1.0, 5.0);    // rating-like
        p.attrs[2] = s.uniform();
        p.attrs[3] = s.uniform();
        p.image_feature = Tensor::randn({cfg.image_dim}, s);
        products.push_back(std::move(p));
    }
    return products;
}

inline std::vector<Product> generate_catalog(std::uint64_t seed, int count, int categories) {
    CatalogConfig cfg;
    cfg.categories = categories;
    return generate_catalog(seed, count, cfg);
}

// ---------------------------------------------------------------------------
// Fixed embedding tables. The environment's notion of "what text looks like"
// must stay stable while models train, so these are never updated.
// ---------------------------------------------------------------------------

struct EmbeddingTable {
    Tensor table;  // [rows x dim]

    Tensor embed_mean(std::span<const int> tokens) const {
        if (tokens.empty()) {
            throw DegenerateInputError("embed_mean: empty token sequence");
        }
        int dim = table.cols();
        Tensor out({dim});
        for (int tok : tokens) {
            if (tok < 0 || tok >= table.rows()) {
                throw VocabError("embed_mean: token " + std::to_string(tok) + " out of range");
            }
            for (int j = 0; j < dim; ++j) {
                out[static_cast<std::size_t>(j)] += table.at(tok, j);
            }
        }
        double inv = 1.0 / static_cast<double>(tokens.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] *= inv;
        }
        return out;
    }

    Tensor embed_chars(const std::string& text) const {
        std::vector<int> toks;
        toks.reserve(text.size());
        for (unsigned char c : text) {
            toks.push_back(static_cast<int>(c));
        }
        return embed_mean(toks);
    }
};

inline EmbeddingTable make_embedding_table(std::uint64_t seed, std::string_view purpose, int rows, int dim) {
    rng::Stream s(rng::derive(seed, purpose));
    return EmbeddingTable{Tensor::randn({rows, dim}, s, 1.0 / std::sqrt(static_cast<double>(dim)))};
}

// ---------------------------------------------------------------------------
// Instruction templates, stored as data. Each template is a symbolic stand-in
// for one phrasing of the generation/comparison question; distinct ids yield
// distinct serializations. Every template consumes the title, which is unique
// per product, so serialization stays injective over any catalog.
// ---------------------------------------------------------------------------

enum class TemplateModel { pm, rm };

struct InstructTemplate {
    int id = 0;
    TemplateModel model = TemplateModel::pm;
    bool use_title = true;
    bool use_category = true;
    bool use_attrs = true;
};

class TemplateRegistry {
public:
    static TemplateRegistry default_registry() {
        TemplateRegistry reg;
        // 8 prompt-model phrasings, all with full product context.
        for (int i = 0; i < 8; ++i) {
            reg.templates_.push_back({i, TemplateModel::pm, true, true, true});
        }
        // 13 reward-model phrasings; ids 8 (full) and 9 (title only) anchor
        // the extra-information ablation.
        reg.templates_.push_back({8, TemplateModel::rm, true, true, true});
        reg.templates_.push_back({9, TemplateModel::rm, true, false, false});
        reg.templates_.push_back({10, TemplateModel::rm, true, true, false});
        reg.templates_.push_back({11, TemplateModel::rm, true, false, true});
        for (int i = 12; i < 21; ++i) {
            reg.templates_.push_back({i, TemplateModel::rm, true, true, true});
        }
        return reg;
    }

    static TemplateRegistry from_json(const nlohmann::json& j) {
        TemplateRegistry reg;
        try {
            for (const auto& t : j.at("templates")) {
                InstructTemplate tpl;
                tpl.id = t.at("id").get<int>();
                tpl.model = t.at("model").get<std::string>() == "rm" ? TemplateModel::rm : TemplateModel::pm;
                tpl.use_title = t.at("use_title").get<bool>();
                tpl.use_category = t.at("use_category").get<bool>();
                tpl.use_attrs = t.at("use_attrs").get<bool>();
                reg.templates_.push_back(tpl);
            }
        } catch (const nlohmann::json::exception& e) {
            throw RegistryError(std::string("template registry: malformed JSON: ") + e.what());
        }
        return reg;
    }

    nlohmann::json to_json() const {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& t : templates_) {
            arr.push_back({{"id", t.id},
                           {"model", t.model == TemplateModel::rm ? "rm" : "pm"},
                           {"use_title", t.use_title},
                           {"use_category", t.use_category},
                           {"use_attrs", t.use_attrs}});
        }
        return nlohmann::json{{"templates", arr}};
    }

    const InstructTemplate& get(int id) const {
        for (const auto& t : templates_) {
            if (t.id == id) {
                return t;
            }
        }
        throw RegistryError("unknown question id " + std::to_string(id));
    }

    const std::vector<InstructTemplate>& all() const { return templates_; }

    int default_pm_question() const { return first_of(TemplateModel::pm, true); }
    int default_rm_question(bool with_attrs) const {
        for (const auto& t : templates_) {
            if (t.model == TemplateModel::rm && t.use_attrs == with_attrs) {
                return t.id;
            }
        }
        throw RegistryError("no reward-model template with the requested fields");
    }

private:
    int first_of(TemplateModel m, bool with_attrs) const {
        for (const auto& t : templates_) {
            if (t.model == m && t.use_attrs == with_attrs) {
                return t.id;
            }
        }
        throw RegistryError("no template for requested model kind");
    }

    std::vector<InstructTemplate> templates_;
};

/// Deterministic serialization of a question template plus product
/// attributes, with its embedding under the fixed character table.
struct InstructPrompt {
    int question_id = 0;
    std::string serialized;
    Tensor context_embedding;  // [context_dim]
};

namespace detail {

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string serialize_prompt(const InstructTemplate& tpl, const Product& p) {
    std::string out = "q" + std::to_string(tpl.id);
    if (tpl.use_title) {
        out += "|t=";
        for (std::size_t i = 0; i < p.title.size(); ++i) {
            out += (i ? "," : "") + std::to_string(p.title[i]);
        }
    }
    if (tpl.use_category) {
        out += "|c=" + std::to_string(p.category);
    }
    if (tpl.use_attrs) {
        out += "|a=";
        for (std::size_t i = 0; i < p.attrs.size(); ++i) {
            out += (i ? "," : "") + detail::format_real(p.attrs[i]);
        }
    }
    return out;
}

inline InstructPrompt build_instruct_prompt(int question_id, const Product& p,
                                            const TemplateRegistry& registry,
                                            const EmbeddingTable& char_table) {
    const InstructTemplate& tpl = registry.get(question_id);
    InstructPrompt prompt;
    prompt.question_id = question_id;
    prompt.serialized = serialize_prompt(tpl, p);
    prompt.context_embedding = char_table.embed_chars(prompt.serialized);
    return prompt;
}

// ---------------------------------------------------------------------------
// Click records and pairwise datasets.
// ---------------------------------------------------------------------------

struct ClickRecord {
    int product_id = 0;
    std::vector<int> background_tokens;
    long exposures = 0;
    long clicks = 0;

    double empirical_ctr() const {
        return exposures > 0 ? static_cast<double>(clicks) / static_cast<double>(exposures) : 0.0;
    }
};

inline nlohmann::json click_record_to_json(const ClickRecord& r) {
    if (r.clicks > r.exposures || r.clicks < 0 || r.exposures < 0) {
        throw InvariantError("click record: clicks must lie in [0, exposures]");
    }
    return nlohmann::json{{"product_id", r.product_id},
                          {"background_tokens", r.background_tokens},
                          {"exposures", r.exposures},
                          {"clicks", r.clicks}};
}

inline ClickRecord click_record_from_json(const nlohmann::json& j) {
    ClickRecord r;
    try {
        r.product_id = j.at("product_id").get<int>();
        r.background_tokens = j.at("background_tokens").get<std::vector<int>>();
        r.exposures = j.at("exposures").get<long>();
        r.clicks = j.at("clicks").get<long>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("click record: malformed JSON: ") + e.what());
    }
    if (r.clicks > r.exposures || r.clicks < 0 || r.exposures < 0) {
        throw InvariantError("click record: clicks must lie in [0, exposures]");
    }
    return r;
}

inline void save_click_log(const std::filesystem::path& path, std::span<const ClickRecord> records) {
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open for write: " + path.string());
    }
    for (const ClickRecord& r : records) {
        out << click_record_to_json(r).dump() << "\n";
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

inline std::vector<ClickRecord> load_click_log(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open for read: " + path.string());
    }
    std::vector<ClickRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        try {
            records.push_back(click_record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(std::string("click log: parse error: ") + e.what());
        }
    }
    return records;
}

enum class PairLabel { left_higher, right_higher };

/// Same-product pair annotated with the ground-truth CTRs of both sides. The
/// label always follows the true CTR ordering, which makes it invariant to
/// uniform shifts of a category's base rate.
struct PairSample {
    int product_id = 0;
    ClickRecord left;
    ClickRecord right;
    PairLabel label = PairLabel::left_higher;
    double true_ctr_left = 0.0;
    double true_ctr_right = 0.0;
};

struct PairThresholds {
    long min_exposures = 50;    // E
    double min_rel_diff = 0.01;  // D, on empirical CTRs
};

/// Ground-truth CTR for a record, supplied by the click oracle.
using TrueCtrFn = std::function<double(const ClickRecord&)>;

/// Emits every same-product pair whose two records each have exposures >= E
/// and whose empirical CTRs differ by more than D relative to the smaller
/// one. Pairs with min CTR zero or exactly tied true CTRs are excluded.
inline std::vector<PairSample> filter_pairs(std::span<const ClickRecord> records,
                                            long min_exposures, double min_rel_diff,
                                            const TrueCtrFn& true_ctr) {
    if (min_exposures < 0 || min_rel_diff < 0.0) {
        throw ConfigError("filter_pairs: thresholds must be non-negative");
    }
    // Group record indices by product, preserving input order.
    std::vector<int> product_ids;
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < records.size(); ++i) {
        int pid = records[i].product_id;
        auto it = std::find(product_ids.begin(), product_ids.end(), pid);
        if (it == product_ids.end()) {
            product_ids.push_back(pid);
            groups.emplace_back();
            groups.back().push_back(i);
        } else {
            groups[static_cast<std::size_t>(it - product_ids.begin())].push_back(i);
        }
    }

    std::vector<PairSample> out;
    for (const auto& group : groups) {
        for (std::size_t a = 0; a < group.size(); ++a) {
            for (std::size_t b = a + 1; b < group.size(); ++b) {
                const ClickRecord& l = records[group[a]];
                const ClickRecord& r = records[group[b]];
                if (l.exposures < min_exposures || r.exposures < min_exposures) {
                    continue;
                }
                double cl = l.empirical_ctr();
                double cr = r.empirical_ctr();
                double lo = std::min(cl, cr);
                if (lo <= 0.0) {
                    continue;
                }
                if (std::abs(cl - cr) / lo <= min_rel_diff) {
                    continue;
                }
                double tl = true_ctr(l);
                double tr = true_ctr(r);
                if (tl == tr) {
                    continue;  // exact ties carry no label
                }
                PairSample p;
                p.product_id = l.product_id;
                p.left = l;
                p.right = r;
                p.true_ctr_left = tl;
                p.true_ctr_right = tr;
                p.label = tl > tr ? PairLabel::left_higher : PairLabel::right_higher;
                out.push_back(std::move(p));
            }
        }
    }
    return out;
}

inline bool pair_meets(const PairSample& p, const PairThresholds& thr) {
    if (p.left.exposures < thr.min_exposures || p.right.exposures < thr.min_exposures) {
        return false;
    }
    double cl = p.left.empirical_ctr();
    double cr = p.right.empirical_ctr();
    double lo = std::min(cl, cr);
    return lo > 0.0 && std::abs(cl - cr) / lo > thr.min_rel_diff;
}

struct PairSplit {
    std::vector<PairSample> train;
    std::vector<PairSample> test;
};

/// Splits pairs into train/test sets that are disjoint by product id. Test
/// pairs must additionally clear the stricter test thresholds.
inline PairSplit split_train_test(std::span<const PairSample> pairs, const PairThresholds& train_thr,
                                  const PairThresholds& test_thr, double test_fraction,
                                  std::uint64_t seed) {
    if (test_thr.min_exposures < train_thr.min_exposures || test_thr.min_rel_diff < train_thr.min_rel_diff) {
        throw ConfigError("split_train_test: test thresholds must be at least as strict as train");
    }
    if (test_fraction < 0.0 || test_fraction > 1.0) {
        throw ConfigError("split_train_test: test fraction must lie in [0, 1]");
    }
    std::set<int> id_set;
    for (const PairSample& p : pairs) {
        id_set.insert(p.product_id);
    }
    std::vector<int> ids(id_set.begin(), id_set.end());
    rng::Stream s(rng::derive(seed, "split"));
    s.shuffle(ids);
    std::size_t n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
    std::set<int> test_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_test));

    PairSplit split;
    for (const PairSample& p : pairs) {
        if (test_ids.count(p.product_id)) {
            if (pair_meets(p, test_thr)) {
                split.test.push_back(p);
            }
        } else if (pair_meets(p, train_thr)) {
            split.train.push_back(p);
        }
    }
    for (const PairSample& p : split.train) {
        if (test_ids.count(p.product_id)) {
            throw PartitionError("split_train_test: product id leaked across the split");
        }
    }
    return split;
}

// ---------------------------------------------------------------------------
// Catalog persistence.
// ---------------------------------------------------------------------------

inline nlohmann::json product_to_json(const Product& p) {
    std::vector<double> feat(p.image_feature.data().begin(), p.image_feature.data().end());
    return nlohmann::json{{"id", p.id},
                          {"category", p.category},
                          {"title", p.title},
                          {"attrs", p.attrs},
                          {"image_feature", feat}};
}

inline Product product_from_json(const nlohmann::json& j) {
    Product p;
    try {
        p.id = j.at("id").get<int>();
        p.category = j.at("category").get<int>();
        p.title = j.at("title").get<std::vector<int>>();
        p.attrs = j.at("attrs").get<std::array<double, 4>>();
        auto feat = j.at("image_feature").get<std::vector<double>>();
        int n = static_cast<int>(feat.size());
        p.image_feature = Tensor({n}, std::move(feat));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("product: malformed JSON: ") + e.what());
    }
    return p;
}

inline void save_catalog(const std::filesystem::path& path, std::span<const Product> products) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Product& p : products) {
        arr.push_back(product_to_json(p));
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot open for write: " + path.string());
    }
    out << nlohmann::json{{"products", arr}}.dump(2) << "\n";
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

inline std::vector<Product> load_catalog(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open for read: " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("catalog: parse error: ") + e.what());
    }
    std::vector<Product> products;
    for (const auto& pj : j.at("products")) {
        products.push_back(product_from_json(pj));
    }
    return products;
}

}  // namespace ctrlab::catalog
