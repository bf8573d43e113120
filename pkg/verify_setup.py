import importlib
import sys


def check_import(module_name, package_name=None):
    if package_name is None:
        package_name = module_name
    try:
        module = importlib.import_module(module_name)
        version = getattr(module, "__version__", "OK")
        print(f"✅ {package_name:20s} - {version}")
        return True
    except Exception as e:
        print(f"❌ {package_name:20s} - {e}")
        return False


def check_engine():
    """Smoke-run the pieces that need the native stack: PNG codec, sympy matcher, codebook."""
    try:
        from codebook.parser import dump_codebook, generate_codebook, load_codebook
        from render.executor import blank_image
        from utils.loader import encode_png
        from verifier.matchers import match_symbolic

        cb = generate_codebook(4, 3, seed=0)
        assert load_codebook(dump_codebook(cb)).fingerprint == cb.fingerprint
        assert encode_png(blank_image(8, 8)).startswith(b"\x89PNG")
        assert match_symbolic("x + 1", "1 + x") == 1.0
        print(f"✅ {'omni-engine':20s} - codebook, PNG and symbolic matching OK")
        return True
    except Exception as e:
        print(f"❌ {'omni-engine':20s} - {e}")
        return False


def main():
    print("="*50)
    print("SETUP VERIFICATION")
    print("="*50)
    checks = [
        ("numpy", "NumPy"),
        ("cv2", "OpenCV"),
        ("yaml", "PyYAML"),
        ("sympy", "SymPy"),
        ("matplotlib", "Matplotlib"),
    ]
    results = [check_import(m, n) for m, n in checks]
    if all(results):
        results.append(check_engine())
    print("="*50)
    if all(results):
        print("✅ ALL PACKAGES WORKING")
        return 0
    else:
        print("❌ SOME PACKAGES FAILED")
        return 1


if __name__ == "__main__":
    sys.exit(main())
