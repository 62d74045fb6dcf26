#pragma once

// Disk registry of trained Knowledge Modules: one bundle directory per
// doc_id under a common root. Writes are serialized through an flock'd
// lock file, and overwrite swaps in a fully written replacement directory,
// so readers never observe a half-written module.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <string>
#include <vector>

#include "km/adapters.hpp"
#include "km/common.hpp"
#include "km/serialize.hpp"

namespace km {

namespace detail {
class FileLock {
 public:
  FileLock(const fs::path& path, bool exclusive) {
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) fail("registry: cannot open lock file " + path.string());
    if (::flock(fd_, exclusive ? LOCK_EX : LOCK_SH) != 0) {
      ::close(fd_);
      fail("registry: cannot lock " + path.string());
    }
  }
  ~FileLock() {
    if (fd_ >= 0) ::close(fd_);  // closing drops the flock
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_ = -1;
};
}  // namespace detail

class Registry {
 public:
  explicit Registry(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
  }

  const fs::path& root() const { return root_; }
  fs::path dir_of(const std::string& doc_id) const { return root_ / doc_id; }

  void put(const KnowledgeModule& km, bool overwrite = false,
           const std::string& owner = "") {
    validate_doc_id(km.doc_id);
    detail::FileLock lock(lock_path(), /*exclusive=*/true);
    const fs::path dst = dir_of(km.doc_id);
    if (!overwrite && fs::exists(dst))
      fail("registry: doc_id '" + km.doc_id +
           "' already exists (pass overwrite to replace)");
    KnowledgeModule stored = km;
    stored.metadata["owner"] = owner;
    const fs::path tmp = root_ / (".put-" + km.doc_id + ".tmp");
    fs::remove_all(tmp);
    save_km(tmp, stored);
    if (fs::exists(dst)) {
      const fs::path trash = root_ / (".old-" + km.doc_id + ".tmp");
      fs::remove_all(trash);
      fs::rename(dst, trash);
      fs::rename(tmp, dst);
      fs::remove_all(trash);
    } else {
      fs::rename(tmp, dst);
    }
  }

  KnowledgeModule get(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    detail::FileLock lock(lock_path(), /*exclusive=*/false);
    require_present(doc_id);
    return load_km(dir_of(doc_id));
  }

  void remove(const std::string& doc_id) {
    validate_doc_id(doc_id);
    detail::FileLock lock(lock_path(), /*exclusive=*/true);
    require_present(doc_id);
    fs::remove_all(dir_of(doc_id));
  }

  std::vector<std::string> list() const {
    detail::FileLock lock(lock_path(), /*exclusive=*/false);
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(root_)) {
      if (!entry.is_directory()) continue;
      const std::string name = entry.path().filename().string();
      if (name.empty() || name[0] == '.') continue;
      if (bundle_exists(entry.path())) ids.push_back(name);
    }
    std::sort(ids.begin(), ids.end());
    return ids;
  }

  // Manifest metadata only; does not touch the tensor blob.
  nlohmann::json inspect(const std::string& doc_id) const {
    validate_doc_id(doc_id);
    detail::FileLock lock(lock_path(), /*exclusive=*/false);
    require_present(doc_id);
    std::ifstream mf(dir_of(doc_id) / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    return manifest.value("extra", nlohmann::json::object());
  }

  static void validate_doc_id(const std::string& doc_id) {
    if (doc_id.empty()) fail("registry: doc_id must not be empty");
    // doc_id doubles as a directory name; keep it to a shell-safe alphabet
    if (!std::isalnum(static_cast<unsigned char>(doc_id[0])))
      fail("registry: doc_id '" + doc_id + "' must start with a letter or digit");
    for (char c : doc_id)
      if (!std::isalnum(static_cast<unsigned char>(c)) && c != '-' && c != '_' && c != '.')
        fail("registry: doc_id '" + doc_id + "' contains unsupported character '" +
             std::string(1, c) + "'");
  }

 private:
  fs::path lock_path() const { return root_ / ".lock"; }

  void require_present(const std::string& doc_id) const {
    if (!bundle_exists(dir_of(doc_id)))
      fail("registry: no knowledge module '" + doc_id + "'");
  }

  fs::path root_;
};

}  // namespace km
