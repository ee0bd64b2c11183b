#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "cpcanet/errors.hpp"
#include "cpcanet/io.hpp"
#include "cpcanet/matrix.hpp"
#include "cpcanet/rng.hpp"
#include "helpers.hpp"

using namespace cpcanet;
namespace t = cpcanet::testing;

TEST_CASE("matmul against hand computation") {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{5, 6}, {7, 8}};
    const Matrix c = matmul(a, b);
    CHECK(c(0, 0) == 19);
    CHECK(c(0, 1) == 22);
    CHECK(c(1, 0) == 43);
    CHECK(c(1, 1) == 50);
    CHECK_THROWS_AS(matmul(a, Matrix(3, 2)), ShapeMismatch);
}

TEST_CASE("frobenius norm examples") {
    CHECK(frobenius_norm(Matrix(3, 3, 0.0)) == 0.0);
    CHECK(frobenius_norm(Matrix::identity(4)) == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(frobenius_norm(Matrix{{3, 4}, {0, 0}}) == doctest::Approx(5.0).epsilon(1e-15));
}

TEST_CASE("offdiag energy examples") {
    CHECK(offdiag_energy(Matrix{{2, 0}, {0, -7}}) == 0.0);
    CHECK(offdiag_energy(Matrix{{1, 3}, {3, 1}}) == doctest::Approx(9.0).epsilon(1e-15));
    // transpose symmetry
    Rng rng(11);
    const Matrix m = t::random_matrix(rng, 5, 5);
    CHECK(offdiag_energy(m) == doctest::Approx(offdiag_energy(transpose(m))).epsilon(1e-15));
    CHECK(offdiag_energy(m) >= 0.0);
    CHECK_THROWS_AS(offdiag_energy(Matrix(1, 1, 3.0)), DimensionTooSmall);
}

TEST_CASE("lu solve and determinant") {
    Rng rng(7);
    const Matrix a = [&] {
        Matrix m = t::random_matrix(rng, 6, 6);
        for (std::size_t i = 0; i < 6; ++i) m(i, i) += 4.0;
        return m;
    }();
    const Matrix x_true = t::random_matrix(rng, 6, 3);
    const Matrix b = matmul(a, x_true);
    const Matrix x = solve_lu(a, b);
    CHECK(max_abs(x - x_true) < 1e-12);

    const LuFactorization lu(a);
    const Matrix bt = matmul(transpose(a), x_true);
    CHECK(max_abs(lu.solve_transposed(bt) - x_true) < 1e-12);

    CHECK(determinant(Matrix::identity(5)) == 1.0);
    CHECK(determinant(Matrix{{0, 1}, {1, 0}}) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(solve_lu(Matrix(3, 3, 0.0), Matrix(3, 1, 1.0)), SingularMatrix);
}

TEST_CASE("qr produces orthonormal columns with det +1 correction path") {
    Rng rng(3);
    for (const std::size_t d : {3ul, 8ul, 20ul}) {
        Matrix g = t::random_matrix(rng, d, d);
        for (std::size_t i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
        const Matrix q = qr_orthonormal(g);
        CHECK(frobenius_norm(matmul(transpose(q), q) - Matrix::identity(d)) < 1e-12);
    }
}

TEST_CASE("matrix csv round trip") {
    Rng rng(19);
    const Matrix m = t::random_matrix(rng, 4, 7, -100.0, 100.0);
    const std::string path =
        (std::filesystem::temp_directory_path() / "cpcanet_matrix_test.csv").string();
    write_matrix_csv(m, path);
    const Matrix back = read_matrix_csv(path);
    REQUIRE(back.rows() == m.rows());
    REQUIRE(back.cols() == m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(back.data()[i] == m.data()[i]);
    std::filesystem::remove(path);
}

TEST_CASE("csv header skip") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "cpcanet_header_test.csv").string();
    {
        std::FILE* f = std::fopen(path.c_str(), "w");
        std::fputs("a,b\n1.5,2.5\n", f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(read_matrix_csv(path), SchemaMismatch);
    const Matrix m = read_matrix_csv(path, true);
    CHECK(m.rows() == 1);
    CHECK(m(0, 1) == 2.5);
    std::filesystem::remove(path);
}
