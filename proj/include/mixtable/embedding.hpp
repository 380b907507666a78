#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <openssl/sha.h>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "mixtable/common.hpp"
#include "mixtable/dataset.hpp"
#include "mixtable/rng.hpp"

namespace mixtable {

using EmbeddingVector = std::vector<float>;

// Stacked per-category embeddings, rows in schema category order.
struct CategoryMatrix {
    int dim = 0;
    std::vector<EmbeddingVector> rows;

    size_t n_categories() const { return rows.size(); }
};

using Sha256Digest = std::array<uint8_t, 32>;

inline Sha256Digest sha256_digest(std::string_view text) {
    Sha256Digest digest;
    SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), digest.data());
    return digest;
}

struct Sha256Hash {
    size_t operator()(const Sha256Digest& d) const {
        uint64_t h;
        std::memcpy(&h, d.data(), sizeof(h));
        return static_cast<size_t>(h);
    }
};

// "[column name s] is [category c]"
inline std::string category_sentence(const std::string& feature_name, const std::string& category) {
    if (feature_name.empty() || category.empty())
        throw DataError("category_sentence: feature name and category must be nonempty");
    return feature_name + " is " + category;
}

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual int dim() const = 0;
    virtual std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) = 0;

    EmbeddingVector embed(const std::string& text) {
        if (text.empty()) throw DataError("embed: text must be nonempty");
        return embed_batch({text}).front();
    }
};

// Deterministic stand-in for a text encoder: seeds a counter-based generator
// from SHA-256(text), draws d_f standard normals, L2-normalizes. Identical
// output for identical text on every platform.
class HashEmbeddingProvider : public EmbeddingProvider {
public:
    explicit HashEmbeddingProvider(int d_f) : d_f_(d_f) {
        if (d_f <= 0) throw ConfigError("embedding dim must be positive");
    }

    int dim() const override { return d_f_; }

    std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override {
        std::vector<EmbeddingVector> out;
        out.reserve(texts.size());
        for (const auto& text : texts) {
            if (text.empty()) throw DataError("embed: text must be nonempty");
            const Sha256Digest digest = sha256_digest(text);
            uint64_t seed;
            std::memcpy(&seed, digest.data(), sizeof(seed));
            CounterRng rng(seed);
            EmbeddingVector v(d_f_);
            double norm_sq = 0.0;
            for (int i = 0; i < d_f_; ++i) {
                v[i] = static_cast<float>(rng.next_gaussian());
                norm_sq += static_cast<double>(v[i]) * static_cast<double>(v[i]);
            }
            const float inv = static_cast<float>(1.0 / std::sqrt(norm_sq));
            for (auto& x : v) x *= inv;
            out.push_back(std::move(v));
        }
        return out;
    }

private:
    int d_f_;
};

// HTTP JSON batch endpoint: POST {endpoint}/embed with {"texts":[...]},
// expects {"embeddings":[[...],...]}. Bearer token from MIXTABLE_EMBED_TOKEN.
// Retries with exponential backoff, hard fail after max_retries; never falls
// back to another provider.
class RemoteEmbeddingProvider : public EmbeddingProvider {
public:
    RemoteEmbeddingProvider(std::string endpoint, int d_f, int max_retries = 3,
                            int backoff_ms = 250)
        : endpoint_(std::move(endpoint)), d_f_(d_f), max_retries_(max_retries),
          backoff_ms_(backoff_ms) {
        if (d_f <= 0) throw ConfigError("embedding dim must be positive");
        if (endpoint_.empty()) throw ConfigError("remote provider needs an endpoint");
    }

    int dim() const override { return d_f_; }

    std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override {
        for (const auto& t : texts) {
            if (t.empty()) throw DataError("embed: text must be nonempty");
        }
        nlohmann::json body;
        body["texts"] = texts;
        const std::string payload = body.dump();

        std::string last_error;
        for (int attempt = 0; attempt <= max_retries_; ++attempt) {
            if (attempt > 0) {
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(backoff_ms_ << (attempt - 1)));
            }
            httplib::Client client(endpoint_);
            client.set_connection_timeout(10, 0);
            client.set_read_timeout(60, 0);
            httplib::Headers headers;
            if (const char* token = std::getenv("MIXTABLE_EMBED_TOKEN")) {
                headers.emplace("Authorization", std::string("Bearer ") + token);
            }
            auto res = client.Post("/embed", headers, payload, "application/json");
            if (!res) {
                last_error = concat("connection failed (", httplib::to_string(res.error()), ")");
                continue;
            }
            if (res->status == 401 || res->status == 403) {
                // auth failures do not heal on retry
                throw ProviderError(concat("embedding endpoint rejected auth (status ",
                                           res->status, ")"));
            }
            if (res->status != 200) {
                last_error = concat("status ", res->status);
                continue;
            }
            return parse_response(res->body, texts.size());
        }
        throw ProviderError(concat("embedding endpoint unreachable after ", max_retries_ + 1,
                                   " attempts: ", last_error));
    }

private:
    std::vector<EmbeddingVector> parse_response(const std::string& body, size_t expected) const {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw ProviderError(concat("bad embedding response: ", e.what()));
        }
        if (!j.contains("embeddings") || !j["embeddings"].is_array())
            throw ProviderError("embedding response lacks 'embeddings' array");
        const auto& arr = j["embeddings"];
        if (arr.size() != expected)
            throw ProviderError(concat("embedding response has ", arr.size(),
                                       " vectors, expected ", expected));
        std::vector<EmbeddingVector> out;
        out.reserve(arr.size());
        for (const auto& jv : arr) {
            EmbeddingVector v = jv.get<EmbeddingVector>();
            if (static_cast<int>(v.size()) != d_f_)
                throw ProviderError(concat("embedding dimension mismatch: got ", v.size(),
                                           ", configured d_f = ", d_f_));
            out.push_back(std::move(v));
        }
        return out;
    }

    std::string endpoint_;
    int d_f_;
    int max_retries_;
    int backoff_ms_;
};

// On-disk cache: sequence of records
//   [32-byte SHA-256 key][u32 LE d_f][d_f x f32 LE]
// Loaded fully on open; appends go through a single writer.
class EmbeddingCache {
public:
    EmbeddingCache() = default;

    explicit EmbeddingCache(std::filesystem::path path) : path_(std::move(path)) {
        if (std::filesystem::exists(path_)) load_file();
    }

    size_t size() const { return map_.size(); }
    const std::filesystem::path& path() const { return path_; }

    const EmbeddingVector* lookup(const std::string& text) const {
        auto it = map_.find(sha256_digest(text));
        return it == map_.end() ? nullptr : &it->second;
    }

    void insert(const std::string& text, const EmbeddingVector& v) {
        const Sha256Digest key = sha256_digest(text);
        std::lock_guard<std::mutex> lock(write_mutex_);
        if (map_.count(key)) return;  // first insertion wins; hits stay byte-identical
        map_.emplace(key, v);
        if (!path_.empty()) append_record(key, v);
    }

private:
    void load_file() {
        std::ifstream in(path_, std::ios::binary);
        if (!in) throw DataError(concat("cannot open embedding cache: ", path_.string()));
        while (true) {
            Sha256Digest key;
            in.read(reinterpret_cast<char*>(key.data()), key.size());
            if (in.gcount() == 0 && in.eof()) break;
            if (in.gcount() != static_cast<std::streamsize>(key.size()))
                throw DataError(concat("truncated embedding cache: ", path_.string()));
            uint32_t dim = 0;
            in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
            if (!in) throw DataError(concat("truncated embedding cache: ", path_.string()));
            EmbeddingVector v(dim);
            in.read(reinterpret_cast<char*>(v.data()), sizeof(float) * dim);
            if (!in) throw DataError(concat("truncated embedding cache: ", path_.string()));
            map_.emplace(key, std::move(v));
        }
    }

    void append_record(const Sha256Digest& key, const EmbeddingVector& v) {
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        if (!out) throw DataError(concat("cannot write embedding cache: ", path_.string()));
        out.write(reinterpret_cast<const char*>(key.data()), key.size());
        const uint32_t dim = static_cast<uint32_t>(v.size());
        out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
        out.write(reinterpret_cast<const char*>(v.data()), sizeof(float) * v.size());
    }

    std::filesystem::path path_;
    std::unordered_map<Sha256Digest, EmbeddingVector, Sha256Hash> map_;
    std::mutex write_mutex_;
};

// Provider wrapper that answers from the cache and records misses.
class CachingProvider : public EmbeddingProvider {
public:
    CachingProvider(std::shared_ptr<EmbeddingProvider> inner, std::shared_ptr<EmbeddingCache> cache)
        : inner_(std::move(inner)), cache_(std::move(cache)) {}

    int dim() const override { return inner_->dim(); }

    std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) override {
        std::vector<EmbeddingVector> out(texts.size());
        std::vector<std::string> misses;
        std::vector<size_t> miss_pos;
        for (size_t i = 0; i < texts.size(); ++i) {
            if (const EmbeddingVector* hit = cache_->lookup(texts[i])) {
                out[i] = *hit;
            } else {
                misses.push_back(texts[i]);
                miss_pos.push_back(i);
            }
        }
        if (!misses.empty()) {
            auto fresh = inner_->embed_batch(misses);
            for (size_t i = 0; i < misses.size(); ++i) {
                cache_->insert(misses[i], fresh[i]);
                out[miss_pos[i]] = std::move(fresh[i]);
            }
        }
        return out;
    }

    EmbeddingCache& cache() { return *cache_; }

private:
    std::shared_ptr<EmbeddingProvider> inner_;
    std::shared_ptr<EmbeddingCache> cache_;
};

inline CategoryMatrix build_category_matrix(const FeatureSchema& feature, EmbeddingProvider& provider) {
    if (!feature.is_categorical())
        throw DataError(concat("build_category_matrix: feature '", feature.name, "' is not categorical"));
    std::vector<std::string> sentences;
    sentences.reserve(feature.categories.size());
    for (const auto& c : feature.categories) sentences.push_back(category_sentence(feature.name, c));
    CategoryMatrix m;
    m.dim = provider.dim();
    m.rows = provider.embed_batch(sentences);
    return m;
}

// Every string the model will condition on for `meta`: descriptions, feature
// names, and category sentences (deduplicated, in first-seen order).
inline std::vector<std::string> conditioning_texts(const MetaDataset& meta) {
    std::vector<std::string> texts;
    std::unordered_map<std::string, bool> seen;
    auto push = [&](const std::string& t) {
        if (!seen.emplace(t, true).second) return;
        texts.push_back(t);
    };
    for (const auto& d : meta.datasets) {
        push(d.description);
        for (const auto& f : d.features) {
            push(f.name);
            if (f.is_categorical()) {
                for (const auto& c : f.categories) push(category_sentence(f.name, c));
            }
        }
    }
    return texts;
}

// Embeds every conditioning string that is not yet cached. Returns the number
// of new cache entries.
inline size_t cache_warm(const MetaDataset& meta, EmbeddingProvider& provider, EmbeddingCache& cache) {
    const std::vector<std::string> texts = conditioning_texts(meta);
    std::vector<std::string> misses;
    for (const auto& t : texts) {
        if (!cache.lookup(t)) misses.push_back(t);
    }
    if (misses.empty()) return 0;
    std::vector<EmbeddingVector> vecs;
    try {
        vecs = provider.embed_batch(misses);
    } catch (const Error& e) {
        std::string keys;
        for (size_t i = 0; i < misses.size() && i < 8; ++i) keys += concat(" '", misses[i], "'");
        if (misses.size() > 8) keys += concat(" (+", misses.size() - 8, " more)");
        throw ProviderError(concat("cache_warm failed; missing keys:", keys, "; cause: ", e.what()));
    }
    for (size_t i = 0; i < misses.size(); ++i) cache.insert(misses[i], vecs[i]);
    return misses.size();
}

}  // namespace mixtable
