#pragma once

#include <memory>
#include <stdexcept>
#include <string>

#include "qsm/qsm.h"

namespace cli {

struct ApiError : std::runtime_error {
    qsm_status status;
    ApiError(qsm_status s, const std::string &msg) : std::runtime_error(msg), status(s) {}
};

inline void check(qsm_status s) {
    if (s != QSM_OK) throw ApiError(s, std::string(qsm_status_name(s)) + ": " + qsm_last_error());
}

struct VolumeFree {
    void operator()(qsm_volume *v) const { qsm_volume_free(v); }
};
struct MaskFree {
    void operator()(qsm_mask *m) const { qsm_mask_free(m); }
};
struct ModelFree {
    void operator()(qsm_model *m) const { qsm_model_free(m); }
};
struct DatasetFree {
    void operator()(qsm_dataset *d) const { qsm_dataset_free(d); }
};
struct StringFree {
    void operator()(char *s) const { qsm_string_free(s); }
};

using Volume = std::unique_ptr<qsm_volume, VolumeFree>;
using Mask = std::unique_ptr<qsm_mask, MaskFree>;
using Model = std::unique_ptr<qsm_model, ModelFree>;
using Dataset = std::unique_ptr<qsm_dataset, DatasetFree>;
using CString = std::unique_ptr<char, StringFree>;

inline Volume read_volume(const std::string &path) {
    qsm_volume *v = nullptr;
    check(qsm_volume_read(path.c_str(), &v));
    return Volume(v);
}

inline Mask read_mask(const std::string &path) {
    qsm_mask *m = nullptr;
    check(qsm_mask_read(path.c_str(), &m));
    return Mask(m);
}

inline Model load_model(const std::string &path) {
    qsm_model *m = nullptr;
    check(qsm_model_load(path.c_str(), &m));
    return Model(m);
}

inline std::string take(char *s) {
    CString owned(s);
    return owned ? std::string(owned.get()) : std::string();
}

} // namespace cli
