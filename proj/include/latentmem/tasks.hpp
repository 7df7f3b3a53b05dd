#pragma once

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmem/common.hpp"

namespace latentmem {

enum class TaskFamily { kv_recall, string_transform, mod_arith };

inline const char* family_name(TaskFamily f) {
  switch (f) {
    case TaskFamily::kv_recall: return "kv_recall";
    case TaskFamily::string_transform: return "string_transform";
    case TaskFamily::mod_arith: return "mod_arith";
  }
  return "?";
}

inline TaskFamily parse_family(const std::string& s) {
  if (s == "kv_recall") return TaskFamily::kv_recall;
  if (s == "string_transform") return TaskFamily::string_transform;
  if (s == "mod_arith") return TaskFamily::mod_arith;
  throw std::invalid_argument("unknown task family '" + s + "' (kv_recall|string_transform|mod_arith)");
}

struct TaskInstance {
  TaskFamily family = TaskFamily::kv_recall;
  std::string world_id;
  std::string query;
  std::string gold;
  std::string split;  // train | eval | demo
};

namespace detail {
inline std::string random_word(Rng& rng, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.uniform_int(26)));
  return s;
}
inline std::string multiset_signature(std::string s) {
  std::sort(s.begin(), s.end());
  return s;
}
}  // namespace detail

// Hidden key -> digit table. Keys are sampled with pairwise-distinct character
// multisets so bag-of-token embeddings can tell them apart; values are a
// shuffled balanced assignment so no digit is globally more rewarding than
// another. The first half of the keys belongs to the train split, the rest to
// eval; demos may cover all.
struct KvWorld {
  std::string world_id;
  std::vector<std::string> keys;
  std::vector<char> values;  // '0'..'9'
  int n_train = 0;
};

inline KvWorld make_kv_world(uint64_t world_seed, int n_keys = 4) {
  if (n_keys < 2) throw std::invalid_argument("make_kv_world: need at least 2 keys");
  Rng rng(mix_seed(world_seed, hash_str("kv-world")));
  KvWorld w;
  w.world_id = "kv" + std::to_string(world_seed);
  std::vector<std::string> signatures;
  while (static_cast<int>(w.keys.size()) < n_keys) {
    std::string key = detail::random_word(rng, 7 + rng.uniform_int(2));
    std::string sig = detail::multiset_signature(key);
    if (std::find(signatures.begin(), signatures.end(), sig) != signatures.end()) continue;
    signatures.push_back(sig);
    w.keys.push_back(key);
  }
  for (int i = 0; i < n_keys; ++i) w.values.push_back(static_cast<char>('0' + i % 4));
  for (int i = n_keys - 1; i > 0; --i) std::swap(w.values[static_cast<size_t>(i)],
                                                 w.values[static_cast<size_t>(rng.uniform_int(i + 1))]);
  w.n_train = n_keys / 2;
  return w;
}

// String-rewrite rule hidden behind a world codeword.
struct TransformWorld {
  std::string world_id;
  std::string codeword;
  int rule = 0;  // 0 reverse, 1 caesar, 2 duplicate
  int caesar_k = 1;
};

inline TransformWorld make_transform_world(uint64_t world_seed) {
  Rng rng(mix_seed(world_seed, hash_str("transform-world")));
  TransformWorld w;
  w.world_id = "st" + std::to_string(world_seed);
  w.codeword = detail::random_word(rng, 5);
  w.rule = rng.uniform_int(3);
  w.caesar_k = 1 + rng.uniform_int(5);
  return w;
}

inline std::string apply_transform(const TransformWorld& w, const std::string& s) {
  switch (w.rule) {
    case 0: {
      std::string r(s.rbegin(), s.rend());
      return r;
    }
    case 1: {
      std::string r = s;
      for (char& c : r)
        if (c >= 'a' && c <= 'z') c = static_cast<char>('a' + (c - 'a' + w.caesar_k) % 26);
      return r;
    }
    default: return s + s;
  }
}

// Opcode word bound to a modular arithmetic operation.
struct ModWorld {
  std::string world_id;
  std::string opword;
  int op = 0;  // 0 add, 1 mul, 2 sub
  int modulus = 5;
};

inline ModWorld make_mod_world(uint64_t world_seed) {
  Rng rng(mix_seed(world_seed, hash_str("mod-world")));
  ModWorld w;
  w.world_id = "ma" + std::to_string(world_seed);
  w.opword = detail::random_word(rng, 5);
  w.op = rng.uniform_int(3);
  w.modulus = 5 + rng.uniform_int(5);
  return w;
}

inline int apply_mod(const ModWorld& w, int a, int b) {
  int r = 0;
  switch (w.op) {
    case 0: r = a + b; break;
    case 1: r = a * b; break;
    default: r = a - b; break;
  }
  return ((r % w.modulus) + w.modulus) % w.modulus;
}

// One task instance. Splits are disjoint by construction: kv_recall partitions
// the key set, string_transform uses length-4 strings for train and length-5
// for eval, mod_arith partitions operand pairs by parity of 10a+b. split
// "demo" enumerates the whole key set (bank bootstrapping).
inline TaskInstance generate_task(TaskFamily family, uint64_t world_seed, const std::string& split,
                                  int index = 0) {
  if (split != "train" && split != "eval" && split != "demo")
    throw std::invalid_argument("generate_task: split must be train|eval|demo, got '" + split + "'");
  TaskInstance t;
  t.family = family;
  t.split = split;
  switch (family) {
    case TaskFamily::kv_recall: {
      KvWorld w = make_kv_world(world_seed);
      t.world_id = w.world_id;
      int ki;
      const int n = static_cast<int>(w.keys.size());
      if (split == "train")
        ki = index % w.n_train;
      else if (split == "eval")
        ki = w.n_train + index % (n - w.n_train);
      else
        ki = index % n;
      t.query = "VALUE OF " + w.keys[static_cast<size_t>(ki)] + "?";
      t.gold = std::string(1, w.values[static_cast<size_t>(ki)]);
      return t;
    }
    case TaskFamily::string_transform: {
      TransformWorld w = make_transform_world(world_seed);
      t.world_id = w.world_id;
      Rng rng(mix_seed(world_seed, mix_seed(hash_str(split), static_cast<uint64_t>(index))));
      const int len = split == "eval" ? 5 : 4;
      std::string s = detail::random_word(rng, len);
      t.query = "RULE " + w.codeword + " APPLY " + s;
      t.gold = apply_transform(w, s);
      return t;
    }
    case TaskFamily::mod_arith: {
      ModWorld w = make_mod_world(world_seed);
      t.world_id = w.world_id;
      Rng rng(mix_seed(world_seed, mix_seed(hash_str(split), static_cast<uint64_t>(index))));
      int a = 0, b = 0;
      for (;;) {
        a = rng.uniform_int(10);
        b = rng.uniform_int(10);
        const bool even = (10 * a + b) % 2 == 0;
        if (split == "eval" ? !even : even) break;
      }
      t.query = w.opword + " " + std::to_string(a) + " " + std::to_string(b) + " mod " +
                std::to_string(w.modulus);
      t.gold = std::to_string(apply_mod(w, a, b));
      return t;
    }
  }
  throw std::invalid_argument("generate_task: unknown family");
}

}  // namespace latentmem
