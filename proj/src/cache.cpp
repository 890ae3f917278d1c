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

#include "koji/cache.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace koji {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::string_view kVersion = "1";

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

void write_text(const fs::path& p, std::string_view text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out)
    throw CacheError(CacheErrc::StoreUnavailable, "cannot write '" + p.string() + "'");
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

// Copies a tree the same way content hashing walks it: regular files and
// directories only, anything else rejected.
void copy_tree(const fs::path& from, const fs::path& to) {
  switch (fs::symlink_status(from).type()) {
    case fs::file_type::regular:
      fs::copy_file(from, to);
      return;
    case fs::file_type::directory: {
      fs::create_directory(to);
      for (const auto& e : fs::directory_iterator(from))
        copy_tree(e.path(), to / e.path().filename());
      return;
    }
    default:
      throw HashError(HashErrc::UnsupportedEntry, from.string(),
                      "'" + from.string() + "' is not a regular file or directory");
  }
}

std::uint64_t tree_size(const fs::path& p) {
  if (fs::is_regular_file(fs::symlink_status(p))) return fs::file_size(p);
  std::uint64_t total = 0;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (fs::is_regular_file(e.symlink_status())) total += fs::file_size(e.path());
  return total;
}

std::string random_token() {
  static thread_local std::mt19937_64 rng(
      std::random_device{}() ^
      static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::uint64_t v = rng();
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

}  // namespace

std::string_view to_string(CacheErrc code) {
  switch (code) {
    case CacheErrc::StoreUnavailable: return "StoreUnavailable";
    case CacheErrc::StoreCorrupt: return "StoreCorrupt";
    case CacheErrc::NotHoldingLock: return "NotHoldingLock";
    case CacheErrc::SourceMissing: return "SourceMissing";
    case CacheErrc::KindMismatch: return "KindMismatch";
  }
  return "Unknown";
}

// ---------------------------------------------------------------------------
// FileLockProvider
// ---------------------------------------------------------------------------

FileLockProvider::FileLockProvider(fs::path dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
}

namespace {

int open_lock_file(const fs::path& path) {
  int fd = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd < 0)
    throw CacheError(CacheErrc::StoreUnavailable,
                     "cannot open lock file '" + path.string() + "': " + std::strerror(errno));
  return fd;
}

LockGuard make_guard(const CausalHash& key, int fd) {
  return LockGuard(key, [fd] { ::close(fd); });  // close drops the flock
}

}  // namespace

LockGuard FileLockProvider::acquire(const CausalHash& key) {
  int fd = open_lock_file(dir_ / (key.hex() + ".lock"));
  while (::flock(fd, LOCK_EX) != 0) {
    if (errno == EINTR) continue;
    int saved = errno;
    ::close(fd);
    throw CacheError(CacheErrc::StoreUnavailable,
                     std::string("flock failed: ") + std::strerror(saved));
  }
  return make_guard(key, fd);
}

std::optional<LockGuard> FileLockProvider::try_acquire(const CausalHash& key,
                                                       std::chrono::milliseconds timeout) {
  int fd = open_lock_file(dir_ / (key.hex() + ".lock"));
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    if (::flock(fd, LOCK_EX | LOCK_NB) == 0) return make_guard(key, fd);
    if (errno != EWOULDBLOCK && errno != EINTR) {
      int saved = errno;
      ::close(fd);
      throw CacheError(CacheErrc::StoreUnavailable,
                       std::string("flock failed: ") + std::strerror(saved));
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      ::close(fd);
      return std::nullopt;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

// ---------------------------------------------------------------------------
// CacheStore
// ---------------------------------------------------------------------------

CacheStore::CacheStore(fs::path root) : root_(fs::absolute(std::move(root))) {
  std::error_code ec;
  fs::create_directories(root_ / "objects", ec);
  fs::create_directories(root_ / "staging", ec);
  if (ec)
    throw CacheError(CacheErrc::StoreUnavailable,
                     "cannot create store at '" + root_.string() + "': " + ec.message());
  locks_ = std::make_unique<FileLockProvider>(root_ / "locks");

  const fs::path version_file = root_ / "version";
  if (!fs::exists(version_file)) {
    write_text(version_file, std::string(kVersion) + "\n");
  } else if (trim(read_text(version_file)) != kVersion) {
    throw CacheError(CacheErrc::StoreUnavailable,
                     "store at '" + root_.string() + "' has unsupported version '" +
                         trim(read_text(version_file)) + "'");
  }
  sweep_staging();
}

fs::path CacheStore::entry_dir(const CausalHash& key) const {
  const std::string hex = key.hex();
  return root_ / "objects" / hex.substr(0, 2) / hex.substr(2);
}

void CacheStore::sweep_staging() {
  // Staging names start with the owning pid. A dead owner's leftovers are
  // garbage by definition: its rename never happened. A recycled pid can
  // delay a sweep, never break one.
  for (const auto& e : fs::directory_iterator(root_ / "staging")) {
    const std::string name = e.path().filename().string();
    pid_t pid = 0;
    std::size_t dash = name.find('-');
    bool parsed = false;
    if (dash != std::string::npos) {
      try {
        pid = static_cast<pid_t>(std::stol(name.substr(0, dash)));
        parsed = true;
      } catch (const std::exception&) {
      }
    }
    const bool alive = parsed && (::kill(pid, 0) == 0 || errno == EPERM);
    if (!alive) {
      std::error_code ec;
      fs::remove_all(e.path(), ec);
    }
  }
}

std::optional<CacheEntry> CacheStore::lookup(const CausalHash& key) const {
  const fs::path dir = entry_dir(key);
  if (!fs::exists(dir)) return std::nullopt;

  const fs::path meta_path = dir / "meta";
  const fs::path payload_path = dir / "payload";
  if (!fs::exists(meta_path) || !fs::exists(payload_path))
    throw CacheError(CacheErrc::StoreCorrupt,
                     "entry " + key.hex() + " is incomplete (missing payload or meta)");

  json meta;
  try {
    meta = json::parse(read_text(meta_path));
  } catch (const json::exception& e) {
    throw CacheError(CacheErrc::StoreCorrupt,
                     "entry " + key.hex() + " has unreadable metadata: " + e.what());
  }

  CacheEntry entry;
  entry.key = key;
  entry.payload = payload_path;
  try {
    entry.kind =
        meta.at("kind").get<std::string>() == "directory" ? PayloadKind::Directory
                                                          : PayloadKind::File;
    entry.size_bytes = meta.at("size").get<std::uint64_t>();
    entry.created_at = std::chrono::system_clock::time_point(
        std::chrono::milliseconds(meta.at("created_at_ms").get<std::int64_t>()));
    auto integrity = CausalHash::parse_hex(meta.at("integrity").get<std::string>());
    if (!integrity) throw CacheError(CacheErrc::StoreCorrupt, "bad integrity digest");
    entry.integrity = *integrity;
  } catch (const json::exception& e) {
    throw CacheError(CacheErrc::StoreCorrupt,
                     "entry " + key.hex() + " has malformed metadata: " + e.what());
  }
  return entry;
}

CacheEntry CacheStore::publish(const LockGuard& guard, const fs::path& source, PayloadKind kind) {
  if (!guard.held())
    throw CacheError(CacheErrc::NotHoldingLock, "publish requires the key's lock");
  const CausalHash key = guard.key();

  if (auto existing = lookup(key)) return *existing;

  auto st = fs::symlink_status(source);
  if (st.type() == fs::file_type::not_found)
    throw CacheError(CacheErrc::SourceMissing, "source '" + source.string() + "' does not exist");
  const bool is_dir = st.type() == fs::file_type::directory;
  if (is_dir != (kind == PayloadKind::Directory))
    throw CacheError(CacheErrc::KindMismatch,
                     "source '" + source.string() + "' is a " +
                         (is_dir ? "directory" : "file") + " but was declared as a " +
                         (kind == PayloadKind::Directory ? "directory" : "file"));

  const fs::path staging =
      root_ / "staging" / (std::to_string(::getpid()) + "-" + random_token());
  fs::create_directories(staging);
  try {
    copy_tree(source, staging / "payload");
    json meta;
    meta["kind"] = kind == PayloadKind::Directory ? "directory" : "file";
    meta["size"] = tree_size(staging / "payload");
    meta["created_at_ms"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                                std::chrono::system_clock::now().time_since_epoch())
                                .count();
    meta["integrity"] = content_hash_path(staging / "payload").hex();
    write_text(staging / "meta", meta.dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    fs::remove_all(staging, ec);
    throw;
  }

  if (pre_commit_hook) pre_commit_hook();

  const fs::path target = entry_dir(key);
  fs::create_directories(target.parent_path());
  std::error_code ec;
  fs::rename(staging, target);  // the commit point
  if (fs::exists(staging)) {
    // Rename failed; if another publisher won the race the entry is there.
    fs::remove_all(staging, ec);
    if (auto existing = lookup(key)) return *existing;
    throw CacheError(CacheErrc::StoreUnavailable, "cannot commit entry " + key.hex());
  }

  auto entry = lookup(key);
  if (!entry)
    throw CacheError(CacheErrc::StoreCorrupt, "entry " + key.hex() + " vanished after commit");
  return *entry;
}

bool CacheStore::evict(const LockGuard& guard) {
  if (!guard.held())
    throw CacheError(CacheErrc::NotHoldingLock, "evict requires the key's lock");
  const fs::path dir = entry_dir(guard.key());
  if (!fs::exists(dir)) return false;
  fs::remove_all(dir);
  return true;
}

StoreStats CacheStore::stats() const {
  StoreStats s;
  const fs::path objects = root_ / "objects";
  for (const auto& shard : fs::directory_iterator(objects)) {
    if (!shard.is_directory()) continue;
    for (const auto& entry : fs::directory_iterator(shard.path())) {
      s.entries++;
      auto key = CausalHash::parse_hex(shard.path().filename().string() +
                                       entry.path().filename().string());
      if (!key) continue;
      try {
        if (auto e = lookup(*key)) s.payload_bytes += e->size_bytes;
      } catch (const CacheError&) {
        // Corrupt entries still count toward `entries`.
      }
    }
  }
  return s;
}

std::vector<CausalHash> CacheStore::verify() const {
  std::vector<CausalHash> corrupt;
  const fs::path objects = root_ / "objects";
  for (const auto& shard : fs::directory_iterator(objects)) {
    if (!shard.is_directory()) continue;
    for (const auto& entry : fs::directory_iterator(shard.path())) {
      auto key = CausalHash::parse_hex(shard.path().filename().string() +
                                       entry.path().filename().string());
      if (!key) continue;
      try {
        auto e = lookup(*key);
        if (!e || content_hash_path(e->payload) != e->integrity) corrupt.push_back(*key);
      } catch (const std::exception&) {
        corrupt.push_back(*key);
      }
    }
  }
  return corrupt;
}

}  // namespace koji
