// Copyright 2026 The Koji Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "koji/hash.hpp"

namespace koji {

enum class CacheErrc {
  StoreUnavailable,  // root unusable or version mismatch
  StoreCorrupt,      // entry directory exists but is incomplete
  NotHoldingLock,
  SourceMissing,
  KindMismatch,
};

std::string_view to_string(CacheErrc code);

class CacheError : public std::runtime_error {
 public:
  CacheError(CacheErrc code, const std::string& message)
      : std::runtime_error(message), code(code) {}

  CacheErrc code;
};

enum class PayloadKind { File, Directory };

struct CacheEntry {
  CausalHash key;
  PayloadKind kind = PayloadKind::File;
  std::filesystem::path payload;  // absolute path inside the store
  std::uint64_t size_bytes = 0;
  std::chrono::system_clock::time_point created_at;
  CausalHash integrity;  // content hash of the payload as stored
};

// Holds one cluster-wide advisory lock on a causal-hash key. Movable;
// releases on destruction; release() is idempotent.
class LockGuard {
 public:
  LockGuard() = default;
  LockGuard(CausalHash key, std::function<void()> release)
      : key_(key), release_(std::move(release)) {}
  LockGuard(LockGuard&& other) noexcept { *this = std::move(other); }
  LockGuard& operator=(LockGuard&& other) noexcept {
    release();
    key_ = other.key_;
    release_ = std::move(other.release_);
    other.release_ = nullptr;
    return *this;
  }
  LockGuard(const LockGuard&) = delete;
  LockGuard& operator=(const LockGuard&) = delete;
  ~LockGuard() { release(); }

  const CausalHash& key() const { return key_; }
  bool held() const { return release_ != nullptr; }
  void release() {
    if (release_) {
      auto r = std::move(release_);
      release_ = nullptr;
      r();
    }
  }

 private:
  CausalHash key_;
  std::function<void()> release_;
};

// Mutual exclusion per causal-hash key across every process sharing the
// store. The file-based implementation below serves single-machine scale; a
// distributed lock service can stand in behind the same interface.
class LockProvider {
 public:
  virtual ~LockProvider() = default;

  // Blocks until the lock is held.
  virtual LockGuard acquire(const CausalHash& key) = 0;

  // Bounded wait; nullopt on timeout.
  virtual std::optional<LockGuard> try_acquire(const CausalHash& key,
                                               std::chrono::milliseconds timeout) = 0;
};

// flock(2)-based locks, one lock file per key under a shared directory.
// The kernel drops a flock when its holder dies, so a crashed holder never
// wedges the key.
class FileLockProvider : public LockProvider {
 public:
  explicit FileLockProvider(std::filesystem::path dir);

  LockGuard acquire(const CausalHash& key) override;
  std::optional<LockGuard> try_acquire(const CausalHash& key,
                                       std::chrono::milliseconds timeout) override;

 private:
  std::filesystem::path dir_;
};

struct StoreStats {
  std::uint64_t entries = 0;
  std::uint64_t payload_bytes = 0;
};

// Content-addressed store of transform outputs, keyed by causal hash.
//
// Layout:
//   <root>/version                   format marker, "1"
//   <root>/objects/<h[0:2]>/<h[2:]>/payload   the file or directory tree
//   <root>/objects/<h[0:2]>/<h[2:]>/meta      JSON: kind, size, timestamps, integrity
//   <root>/locks/<h>.lock            advisory lock files
//   <root>/staging/<pid>-<token>/    in-flight publishes
//
// Publish stages the payload and metadata in a staging directory, then
// commits with one atomic rename of the entry directory. Readers therefore
// see an entry fully or not at all, a publish that dies mid-flight leaves
// only staging garbage (swept on the next open), and two racing publishes
// of the same key resolve to whichever rename lands first.
class CacheStore {
 public:
  // Creates the layout if absent, verifies the version marker, and sweeps
  // staging directories left by dead processes.
  explicit CacheStore(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  LockProvider& locks() { return *locks_; }

  // Nullopt when the key is absent. StoreCorrupt when the entry directory
  // exists but payload or metadata is missing or unreadable.
  std::optional<CacheEntry> lookup(const CausalHash& key) const;

  // Copies `source` into the store under the guard's key. The caller must
  // hold the key's lock. Publishing an existing key is a no-op returning
  // the existing entry.
  CacheEntry publish(const LockGuard& guard, const std::filesystem::path& source,
                     PayloadKind kind);

  // Removes the guard's entry. Returns false when the key was absent.
  bool evict(const LockGuard& guard);

  StoreStats stats() const;

  // Recomputes every entry's integrity hash; returns the keys that no
  // longer match their stored payload.
  std::vector<CausalHash> verify() const;

  // Test seam: runs after an entry is fully staged, immediately before the
  // commit rename.
  std::function<void()> pre_commit_hook;

 private:
  std::filesystem::path entry_dir(const CausalHash& key) const;
  void sweep_staging();

  std::filesystem::path root_;
  std::unique_ptr<FileLockProvider> locks_;
};

}  // namespace koji
